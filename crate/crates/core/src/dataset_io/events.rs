//! Replayable tracking output: per-frame poses plus pose-graph changes.
//!
//! Records, one per line (`#` starts a comment):
//!
//! ```text
//! POSE frame tx ty tz qx qy qz qw ref_kf
//! KF id tx ty tz qx qy qz qw
//! EDGE id1 id2
//! OPT frame
//!   KFPOSE id tx ty tz qx qy qz qw
//! END
//! ```
//!
//! `KF` and `EDGE` records belong to the closest preceding `POSE`. An `OPT`
//! block names the frame at which its corrections take effect. Poses are
//! world-from-camera.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use super::keyframes::{synthesize_keyframes, KeyframePolicy};
use super::{content_lines, parse_err, parse_num, read_text};
use crate::error::{Error, Result};
use crate::pose::Pose;
use crate::pose_graph::GraphUpdate;
use crate::surfel::KeyframeId;

const QUATERNION_NORM_TOL: f64 = 1e-3;

/// A pose as written in the file. The text values are kept so that a file
/// can be written back unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRecord {
    pub translation: [f64; 3],
    /// `(qx, qy, qz, qw)`
    pub quaternion: [f64; 4],
    pose: Pose,
}

impl PoseRecord {
    pub fn new(translation: [f64; 3], quaternion: [f64; 4]) -> std::result::Result<Self, String> {
        let norm = quaternion.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= QUATERNION_NORM_TOL) || translation.iter().any(|v| !v.is_finite()) {
            return Err(format!("quaternion norm {norm} is not 1 (tolerance {QUATERNION_NORM_TOL})"));
        }
        Ok(Self {
            translation,
            quaternion,
            pose: Pose::from_quaternion(quaternion, Vector3::from(translation)),
        })
    }

    pub fn from_pose(pose: &Pose) -> Self {
        Self {
            translation: (*pose.translation()).into(),
            quaternion: pose.quaternion(),
            pose: *pose,
        }
    }

    #[inline]
    pub fn pose(&self) -> Pose {
        self.pose
    }

    fn write(&self, out: &mut String) {
        for v in self.translation.iter().chain(&self.quaternion) {
            let _ = write!(out, " {v}");
        }
    }
}

/// Tracking output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackEvent {
    pub frame_index: usize,
    pub pose: PoseRecord,
    pub ref_keyframe: KeyframeId,
    pub new_keyframes: Vec<(KeyframeId, PoseRecord)>,
    pub new_edges: Vec<(KeyframeId, KeyframeId)>,
    /// Optimized keyframe poses, if the graph was optimized at this frame.
    pub corrections: Option<Vec<(KeyframeId, PoseRecord)>>,
}

impl TrackEvent {
    pub fn new(frame_index: usize, pose: &Pose, ref_keyframe: KeyframeId) -> Self {
        Self {
            frame_index,
            pose: PoseRecord::from_pose(pose),
            ref_keyframe,
            new_keyframes: Vec::new(),
            new_edges: Vec::new(),
            corrections: None,
        }
    }

    pub fn camera_pose(&self) -> Pose {
        self.pose.pose()
    }

    /// Graph changes carried by this event, if any.
    pub fn graph_update(&self) -> Option<GraphUpdate> {
        let update = GraphUpdate {
            new_keyframes: self.new_keyframes.iter().map(|(id, p)| (*id, p.pose())).collect(),
            new_edges: self.new_edges.clone(),
            corrections: self
                .corrections
                .iter()
                .flatten()
                .map(|(id, p)| (*id, p.pose()))
                .collect(),
        };
        (!update.is_empty()).then_some(update)
    }
}

struct Located<T> {
    line: usize,
    value: T,
}

fn pose_fields(tok: &[&str], path: &Path, line: usize) -> Result<PoseRecord> {
    let v: Vec<f64> = tok.iter().map(|t| parse_num(t, path, line)).collect::<Result<_>>()?;
    PoseRecord::new([v[0], v[1], v[2]], [v[3], v[4], v[5], v[6]]).map_err(|m| parse_err(path, line, m))
}

fn expect_len(tok: &[&str], n: usize, path: &Path, line: usize) -> Result<()> {
    if tok.len() != n {
        return Err(parse_err(
            path,
            line,
            format!("{} record needs {} fields, found {}", tok[0], n - 1, tok.len() - 1),
        ));
    }
    Ok(())
}

/// Keyframe poses listed inside one OPT block.
type OptBlock = Vec<(KeyframeId, PoseRecord)>;

/// Parses a track-event file. A file without any `KF`, `EDGE` or `OPT`
/// record is treated as a plain trajectory and gets keyframes from `policy`.
pub fn parse_track_events(text: &str, path: &Path, policy: &KeyframePolicy) -> Result<Vec<TrackEvent>> {
    let mut events: Vec<Located<TrackEvent>> = Vec::new();
    let mut opt_blocks: BTreeMap<usize, Located<OptBlock>> = BTreeMap::new();
    let mut has_graph = false;
    // (frame index, line of the OPT header, poses read so far)
    let mut open_opt: Option<(usize, usize, OptBlock)> = None;
    let mut pose_ref_missing = None;

    for (line, body) in content_lines(text) {
        let tok: Vec<&str> = body.split_whitespace().collect();
        if let Some((frame, start, block)) = &mut open_opt {
            match tok[0] {
                "KFPOSE" => {
                    expect_len(&tok, 9, path, line)?;
                    block.push((KeyframeId(parse_num(tok[1], path, line)?), pose_fields(&tok[2..], path, line)?));
                }
                "END" => {
                    expect_len(&tok, 1, path, line)?;
                    let (frame, start, block) = (*frame, *start, std::mem::take(block));
                    if opt_blocks.insert(frame, Located { line: start, value: block }).is_some() {
                        return Err(parse_err(path, start, format!("second OPT block for frame {frame}")));
                    }
                    open_opt = None;
                }
                other => return Err(parse_err(path, line, format!("unexpected '{other}' inside OPT block"))),
            }
            continue;
        }
        match tok[0] {
            "POSE" => {
                let ref_keyframe = match tok.len() {
                    10 => KeyframeId(parse_num(tok[9], path, line)?),
                    9 => {
                        pose_ref_missing.get_or_insert(line);
                        KeyframeId(0)
                    }
                    n => return Err(parse_err(path, line, format!("POSE record needs 9 fields, found {}", n - 1))),
                };
                let frame_index: usize = parse_num(tok[1], path, line)?;
                if let Some(prev) = events.last() {
                    if frame_index <= prev.value.frame_index {
                        return Err(parse_err(path, line, "frame indices must be strictly increasing"));
                    }
                }
                events.push(Located {
                    line,
                    value: TrackEvent {
                        frame_index,
                        pose: pose_fields(&tok[2..9], path, line)?,
                        ref_keyframe,
                        new_keyframes: Vec::new(),
                        new_edges: Vec::new(),
                        corrections: None,
                    },
                });
            }
            "KF" | "EDGE" => {
                has_graph = true;
                let ev = events
                    .last_mut()
                    .ok_or_else(|| parse_err(path, line, format!("{} record before the first POSE", tok[0])))?;
                if tok[0] == "KF" {
                    expect_len(&tok, 9, path, line)?;
                    let id = KeyframeId(parse_num(tok[1], path, line)?);
                    ev.value.new_keyframes.push((id, pose_fields(&tok[2..], path, line)?));
                } else {
                    expect_len(&tok, 3, path, line)?;
                    let a = KeyframeId(parse_num(tok[1], path, line)?);
                    let b = KeyframeId(parse_num(tok[2], path, line)?);
                    ev.value.new_edges.push((a, b));
                }
            }
            "OPT" => {
                has_graph = true;
                expect_len(&tok, 2, path, line)?;
                open_opt = Some((parse_num(tok[1], path, line)?, line, Vec::new()));
            }
            other => return Err(parse_err(path, line, format!("unknown record '{other}'"))),
        }
    }
    if let Some((_, start, _)) = open_opt {
        return Err(parse_err(path, start, "OPT block without END"));
    }

    if !has_graph {
        let trajectory: Vec<(usize, Pose)> = events.iter().map(|e| (e.value.frame_index, e.value.camera_pose())).collect();
        let mut synthesized = synthesize_keyframes(&trajectory, policy);
        // Keep the file's own pose text.
        for (s, e) in synthesized.iter_mut().zip(&events) {
            s.pose = e.value.pose;
        }
        return Ok(synthesized);
    }
    if let Some(line) = pose_ref_missing {
        return Err(parse_err(path, line, "POSE record without reference keyframe in a file with keyframes"));
    }

    for (frame, block) in opt_blocks {
        let ev = events
            .iter_mut()
            .find(|e| e.value.frame_index == frame)
            .ok_or_else(|| parse_err(path, block.line, format!("OPT block for frame {frame} which has no POSE")))?;
        ev.value.corrections = Some(block.value);
    }
    validate(&events, path)?;
    Ok(events.into_iter().map(|e| e.value).collect())
}

/// Checks that every referenced keyframe exists once the event's own
/// additions are applied.
fn validate(events: &[Located<TrackEvent>], path: &Path) -> Result<()> {
    let mut known = BTreeSet::new();
    for Located { line, value: e } in events {
        for (id, _) in &e.new_keyframes {
            if !known.insert(*id) {
                return Err(parse_err(path, *line, format!("keyframe {id} defined twice")));
            }
        }
        let referenced = e
            .new_edges
            .iter()
            .flat_map(|(a, b)| [a, b])
            .chain(e.corrections.iter().flatten().map(|(id, _)| id))
            .chain([&e.ref_keyframe]);
        for id in referenced {
            if !known.contains(id) {
                return Err(parse_err(path, *line, format!("frame {} refers to unknown keyframe {id}", e.frame_index)));
            }
        }
        if e.new_edges.iter().any(|(a, b)| a == b) {
            return Err(parse_err(path, *line, "edge from a keyframe to itself"));
        }
    }
    Ok(())
}

pub fn load_track_events(path: &Path, policy: &KeyframePolicy) -> Result<Vec<TrackEvent>> {
    parse_track_events(&read_text(path)?, path, policy)
}

/// Canonical text form: each `POSE` is followed by its `KF`, `EDGE` and
/// `OPT` records.
pub fn serialize_track_events(events: &[TrackEvent]) -> String {
    let mut out = String::new();
    for e in events {
        let _ = write!(out, "POSE {}", e.frame_index);
        e.pose.write(&mut out);
        let _ = writeln!(out, " {}", e.ref_keyframe);
        for (id, p) in &e.new_keyframes {
            let _ = write!(out, "KF {id}");
            p.write(&mut out);
            out.push('\n');
        }
        for (a, b) in &e.new_edges {
            let _ = writeln!(out, "EDGE {a} {b}");
        }
        if let Some(corr) = &e.corrections {
            let _ = writeln!(out, "OPT {}", e.frame_index);
            for (id, p) in corr {
                let _ = write!(out, "  KFPOSE {id}");
                p.write(&mut out);
                out.push('\n');
            }
            out.push_str("END\n");
        }
    }
    out
}

pub fn write_track_events(path: &Path, events: &[TrackEvent]) -> Result<()> {
    fs::write(path, serialize_track_events(events)).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
