//! Keyframe pose graph and the surfel map organized by it.
//!
//! Keyframes within a hop threshold of the current reference keyframe are
//! assumed mutually consistent, so only their surfels take part in fusion.
//! When the tracker re-optimizes keyframe poses, every surfel is moved with
//! the keyframe it is attached to.

mod map;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use crate::error::{Error, Result};
use crate::pose::Pose;
use crate::surfel::KeyframeId;

pub use map::{DeformStats, MapDatabase};

/// Default hop threshold for local-map extraction.
pub const DEFAULT_HOP_THRESHOLD: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keyframe {
    pub id: KeyframeId,
    /// Latest world-from-keyframe pose reported by the tracker.
    pub current_pose: Pose,
    /// Pose the attached surfels are currently consistent with.
    pub last_deformed_pose: Pose,
}

impl Keyframe {
    pub fn new(id: KeyframeId, pose: Pose) -> Self {
        Self {
            id,
            current_pose: pose,
            last_deformed_pose: pose,
        }
    }

    #[inline]
    pub fn is_deformed(&self) -> bool {
        self.current_pose == self.last_deformed_pose
    }
}

/// Changes delivered by the tracker for one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphUpdate {
    pub new_keyframes: Vec<(KeyframeId, Pose)>,
    pub new_edges: Vec<(KeyframeId, KeyframeId)>,
    /// Optimized poses of existing keyframes.
    pub corrections: Vec<(KeyframeId, Pose)>,
}

impl GraphUpdate {
    pub fn is_empty(&self) -> bool {
        self.new_keyframes.is_empty() && self.new_edges.is_empty() && self.corrections.is_empty()
    }
}

/// Undirected covisibility graph over keyframes.
#[derive(Debug, Clone)]
pub struct PoseGraph {
    keyframes: BTreeMap<KeyframeId, Keyframe>,
    adjacency: HashMap<KeyframeId, BTreeSet<KeyframeId>>,
    edge_count: usize,
    hop_threshold: u32,
    /// Keyframes whose current pose differs from the last deformed one.
    stale: BTreeSet<KeyframeId>,
}

impl Default for PoseGraph {
    fn default() -> Self {
        Self::new(DEFAULT_HOP_THRESHOLD).expect("default threshold is valid")
    }
}

impl PoseGraph {
    pub fn new(hop_threshold: u32) -> Result<Self> {
        if hop_threshold < 1 {
            return Err(Error::Config("hop threshold must be at least 1".into()));
        }
        Ok(Self {
            keyframes: BTreeMap::new(),
            adjacency: HashMap::new(),
            edge_count: 0,
            hop_threshold,
            stale: BTreeSet::new(),
        })
    }

    #[inline]
    pub fn hop_threshold(&self) -> u32 {
        self.hop_threshold
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn contains(&self, id: KeyframeId) -> bool {
        self.keyframes.contains_key(&id)
    }

    pub fn keyframe(&self, id: KeyframeId) -> Option<&Keyframe> {
        self.keyframes.get(&id)
    }

    /// Keyframes in ascending id order.
    pub fn keyframes(&self) -> impl Iterator<Item = &Keyframe> {
        self.keyframes.values()
    }

    /// Edges as `(smaller, larger)` id pairs, sorted.
    pub fn edges(&self) -> Vec<(KeyframeId, KeyframeId)> {
        let mut out: Vec<_> = self
            .adjacency
            .iter()
            .flat_map(|(&a, ns)| ns.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn neighbours(&self, id: KeyframeId) -> impl Iterator<Item = KeyframeId> + '_ {
        self.adjacency.get(&id).into_iter().flat_map(|s| s.iter().copied())
    }

    /// True when every keyframe's surfels match its current pose.
    pub fn is_deformed(&self) -> bool {
        self.stale.is_empty()
    }

    pub(crate) fn stale_keyframes(&self) -> impl Iterator<Item = KeyframeId> + '_ {
        self.stale.iter().copied()
    }

    pub(crate) fn mark_deformed(&mut self) {
        for id in std::mem::take(&mut self.stale) {
            if let Some(kf) = self.keyframes.get_mut(&id) {
                kf.last_deformed_pose = kf.current_pose;
            }
        }
    }

    /// Inserts keyframes and edges and replaces corrected poses. The update is
    /// validated as a whole before anything changes. Repeated edges are
    /// ignored; last-deformed poses are left for [`MapDatabase::deform`].
    pub fn apply_update(&mut self, update: &GraphUpdate) -> Result<()> {
        let mut added = BTreeSet::new();
        for (id, _) in &update.new_keyframes {
            if self.contains(*id) || !added.insert(*id) {
                return Err(Error::Config(format!("keyframe {id} already exists")));
            }
        }
        let known = |id: &KeyframeId| self.contains(*id) || added.contains(id);
        for (a, b) in &update.new_edges {
            for id in [a, b] {
                if !known(id) {
                    return Err(Error::UnknownKeyframe(*id));
                }
            }
            if a == b {
                return Err(Error::Config(format!("self-loop edge on keyframe {a}")));
            }
        }
        for (id, _) in &update.corrections {
            if !known(id) {
                return Err(Error::UnknownKeyframe(*id));
            }
        }

        for (id, pose) in &update.new_keyframes {
            self.keyframes.insert(*id, Keyframe::new(*id, *pose));
        }
        for &(a, b) in &update.new_edges {
            if self.adjacency.entry(a).or_default().insert(b) {
                self.adjacency.entry(b).or_default().insert(a);
                self.edge_count += 1;
            }
        }
        for (id, pose) in &update.corrections {
            let kf = self.keyframes.get_mut(id).expect("validated above");
            kf.current_pose = *pose;
            if kf.is_deformed() {
                self.stale.remove(id);
            } else {
                self.stale.insert(*id);
            }
        }
        Ok(())
    }

    /// Keyframes fewer than `hop_threshold` edges away from `reference`,
    /// including the reference itself, in ascending id order.
    pub fn locally_consistent_keyframes(&self, reference: KeyframeId) -> Result<Vec<KeyframeId>> {
        if !self.contains(reference) {
            return Err(Error::UnknownKeyframe(reference));
        }
        let max_hops = self.hop_threshold - 1;
        let mut seen = BTreeSet::from([reference]);
        let mut queue = VecDeque::from([(reference, 0u32)]);
        while let Some((id, hops)) = queue.pop_front() {
            if hops == max_hops {
                continue;
            }
            for n in self.neighbours(id) {
                if seen.insert(n) {
                    queue.push_back((n, hops + 1));
                }
            }
        }
        Ok(seen.into_iter().collect())
    }
}
