use std::fmt;

use nalgebra::Vector3;

use crate::pose::Pose;

/// Identifier of a keyframe in the pose graph. Ids are assigned in creation
/// order, so their difference approximates elapsed keyframes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct KeyframeId(pub u32);

impl KeyframeId {
    /// Absolute difference between two ids.
    #[inline]
    pub fn gap(self, other: KeyframeId) -> u32 {
        self.0.abs_diff(other.0)
    }
}

impl fmt::Display for KeyframeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An oriented disk: the map atom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surfel {
    pub position: Vector3<f64>,
    /// Unit normal.
    pub normal: Vector3<f64>,
    pub intensity: f64,
    /// Inverse depth variance (1/m^2).
    pub weight: f64,
    /// Disk radius in meters.
    pub radius: f64,
    /// Number of fusion events this surfel has undergone.
    pub update_count: u32,
    /// Keyframe the surfel was last observed from.
    pub attached_keyframe: KeyframeId,
}

impl Surfel {
    /// Rigidly moves position and normal by `pose`.
    #[inline]
    pub fn transformed(&self, pose: &Pose) -> Surfel {
        Surfel {
            position: pose.transform_point(&self.position),
            normal: pose.transform_vector(&self.normal),
            ..*self
        }
    }

    #[inline]
    pub fn transform(&mut self, pose: &Pose) {
        self.position = pose.transform_point(&self.position);
        self.normal = pose.transform_vector(&self.normal);
    }

    /// Checks the record invariants (unit normal, positive weight and radius).
    pub fn is_well_formed(&self) -> bool {
        (self.normal.norm() - 1.0).abs() <= 1e-6
            && self.weight > 0.0
            && self.radius > 0.0
            && self.position.iter().all(|v| v.is_finite())
    }
}
