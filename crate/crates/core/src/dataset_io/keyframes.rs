//! Keyframe selection for runs driven by a bare trajectory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::events::{PoseRecord, TrackEvent};
use super::{content_lines, parse_err, parse_num, read_text};
use crate::error::{Error, Result};
use crate::pose::Pose;
use crate::surfel::KeyframeId;

/// Slack on the distance thresholds so that exact multiples of the spacing
/// are not lost to rounding.
const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframePolicy {
    /// Meters travelled since the last keyframe.
    pub translation: f64,
    /// Degrees rotated since the last keyframe.
    pub rotation_deg: f64,
    /// Keyframes whose centers are closer than `proximity_factor * translation`
    /// get an extra edge.
    pub proximity_factor: f64,
    pub proximity_edges: bool,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self {
            translation: 0.25,
            rotation_deg: 15.0,
            proximity_factor: 2.0,
            proximity_edges: true,
        }
    }
}

impl KeyframePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.translation > 0.0 && self.rotation_deg > 0.0 && self.proximity_factor >= 0.0) {
            return Err(Error::Config(format!("invalid keyframe policy: {self:?}")));
        }
        Ok(())
    }
}

/// Turns `(frame_index, pose)` pairs into events with keyframes and edges.
///
/// A keyframe is created at the first frame and whenever the camera has
/// moved at least `translation` or turned at least `rotation_deg` since the
/// last keyframe. Consecutive keyframes are linked, and so are keyframes
/// whose centers are closer than `proximity_factor * translation`.
pub fn synthesize_keyframes(trajectory: &[(usize, Pose)], policy: &KeyframePolicy) -> Vec<TrackEvent> {
    let mut events = Vec::with_capacity(trajectory.len());
    let mut keyframes: Vec<Pose> = Vec::new();
    let max_angle = policy.rotation_deg.to_radians();
    let near = policy.proximity_factor * policy.translation - EPS;

    for &(frame, pose) in trajectory {
        let spawn = match keyframes.last() {
            None => true,
            Some(last) => {
                let rel = last.inverse() * pose;
                rel.translation().norm() >= policy.translation - EPS || rel.angle() >= max_angle - EPS
            }
        };
        let id = KeyframeId(keyframes.len() as u32 - u32::from(!spawn));
        let mut event = TrackEvent::new(frame, &pose, id);
        if spawn {
            event.new_keyframes.push((id, PoseRecord::from_pose(&pose)));
            if let Some(prev) = id.0.checked_sub(1) {
                event.new_edges.push((KeyframeId(prev), id));
            }
            if policy.proximity_edges && id.0 >= 2 {
                for (j, kf) in keyframes[..id.0 as usize - 1].iter().enumerate() {
                    if (kf.translation() - pose.translation()).norm() < near {
                        event.new_edges.push((KeyframeId(j as u32), id));
                    }
                }
            }
            keyframes.push(pose);
        }
        events.push(event);
    }
    events
}

/// Reads a TUM trajectory: `timestamp tx ty tz qx qy qz qw` per line.
pub fn load_tum_trajectory(path: &Path) -> Result<Vec<(f64, PoseRecord)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (line, body) in content_lines(&text) {
        let v: Vec<f64> = body
            .split_whitespace()
            .map(|t| parse_num(t, path, line))
            .collect::<Result<_>>()?;
        if v.len() != 8 {
            return Err(parse_err(path, line, format!("expected 8 fields, found {}", v.len())));
        }
        let rec = PoseRecord::new([v[1], v[2], v[3]], [v[4], v[5], v[6], v[7]]).map_err(|m| parse_err(path, line, m))?;
        out.push((v[0], rec));
    }
    Ok(out)
}

/// Matches each frame timestamp to the nearest trajectory sample within
/// `max_dt` seconds and synthesizes keyframes. Frames without a match are
/// skipped.
pub fn trajectory_to_events(
    frame_timestamps: &[f64],
    trajectory: &[(f64, PoseRecord)],
    max_dt: f64,
    policy: &KeyframePolicy,
) -> Vec<TrackEvent> {
    let mut matched = Vec::new();
    let mut records = Vec::new();
    for (i, &t) in frame_timestamps.iter().enumerate() {
        let best = trajectory
            .iter()
            .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()));
        if let Some((_, rec)) = best.filter(|(ts, _)| (ts - t).abs() <= max_dt) {
            matched.push((i, rec.pose()));
            records.push(*rec);
        }
    }
    let mut events = synthesize_keyframes(&matched, policy);
    for (e, r) in events.iter_mut().zip(records) {
        e.pose = r;
    }
    events
}
