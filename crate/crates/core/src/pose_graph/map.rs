use std::collections::BTreeMap;

use super::PoseGraph;
use crate::error::{Error, Result};
use crate::surfel::{KeyframeId, Surfel};

/// Global surfel store, grouped by attached keyframe.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MapDatabase {
    groups: BTreeMap<KeyframeId, Vec<Surfel>>,
    count: usize,
}

/// Work done by one [`MapDatabase::deform`] call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DeformStats {
    pub keyframes: usize,
    pub surfels: usize,
}

impl MapDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Surfels attached to `id` (empty if none).
    pub fn group(&self, id: KeyframeId) -> &[Surfel] {
        self.groups.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// All surfels, ordered by keyframe id then insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Surfel> {
        self.groups.values().flatten()
    }

    pub fn to_vec(&self) -> Vec<Surfel> {
        self.iter().copied().collect()
    }

    /// Approximate bytes held by surfel storage.
    pub fn byte_size(&self) -> usize {
        self.count * std::mem::size_of::<Surfel>()
    }

    /// Moves each stale keyframe's surfels by `current * last_deformed^-1`
    /// and marks the keyframe as deformed. Keyframes whose pose did not
    /// change are not touched.
    pub fn deform(&mut self, graph: &mut PoseGraph) -> DeformStats {
        let mut stats = DeformStats::default();
        for id in graph.stale_keyframes() {
            let kf = graph.keyframe(id).expect("stale keyframe exists");
            stats.keyframes += 1;
            let Some(group) = self.groups.get_mut(&id) else {
                continue;
            };
            let delta = kf.current_pose * kf.last_deformed_pose.inverse();
            for s in group.iter_mut() {
                s.transform(&delta);
            }
            stats.surfels += group.len();
        }
        graph.mark_deformed();
        stats
    }

    /// Removes and returns the surfels attached to keyframes locally
    /// consistent with `reference`. They stay out of the store until
    /// re-inserted.
    pub fn extract_local_map(&mut self, graph: &PoseGraph, reference: KeyframeId) -> Result<Vec<Surfel>> {
        if !graph.is_deformed() {
            return Err(Error::StaleDeformation);
        }
        let ids = graph.locally_consistent_keyframes(reference)?;
        let total: usize = ids.iter().map(|id| self.group(*id).len()).sum();
        let mut out = Vec::with_capacity(total);
        for id in ids {
            if let Some(mut group) = self.groups.remove(&id) {
                out.append(&mut group);
            }
        }
        self.count -= out.len();
        Ok(out)
    }

    /// Adds surfels under their attached keyframes. Fails without changes if
    /// any keyframe is unknown to `graph`.
    pub fn insert_surfels(&mut self, graph: &PoseGraph, surfels: Vec<Surfel>) -> Result<()> {
        if let Some(s) = surfels.iter().find(|s| !graph.contains(s.attached_keyframe)) {
            return Err(Error::UnknownKeyframe(s.attached_keyframe));
        }
        self.count += surfels.len();
        for s in surfels {
            self.groups.entry(s.attached_keyframe).or_default().push(s);
        }
        Ok(())
    }
}
