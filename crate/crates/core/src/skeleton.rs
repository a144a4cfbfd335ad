//! Skeleton topologies, pose sequences and the canonical `poseseq/1` file format.
//!
//! # Joint orderings
//!
//! `h36m17` (root 0):
//! 0 pelvis, 1 right hip, 2 right knee, 3 right ankle, 4 left hip, 5 left knee,
//! 6 left ankle, 7 spine, 8 thorax, 9 neck/nose, 10 head top, 11 left shoulder,
//! 12 left elbow, 13 left wrist, 14 right shoulder, 15 right elbow, 16 right wrist.
//!
//! `sysu20` (root 0):
//! 0 hip center, 1 spine, 2 shoulder center, 3 head, 4-7 left shoulder/elbow/wrist/hand,
//! 8-11 right shoulder/elbow/wrist/hand, 12-15 left hip/knee/ankle/foot,
//! 16-19 right hip/knee/ankle/foot.
//!
//! `ntu25` (root 0):
//! 0 spine base, 1 spine mid, 2 neck, 3 head, 4-7 left shoulder/elbow/wrist/hand,
//! 8-11 right shoulder/elbow/wrist/hand, 12-15 left hip/knee/ankle/foot,
//! 16-19 right hip/knee/ankle/foot, 20 spine shoulder, 21 left hand tip,
//! 22 left thumb, 23 right hand tip, 24 right thumb.
//!
//! # File format
//!
//! UTF-8, line oriented. The first line is a JSON header
//! `{"schema":"poseseq/1","topology":..,"dims":2|3,"units":"px"|"mm","fps":..,"action":..,"subject":..}`
//! (the last three optional); every following non-empty line is one frame, a JSON
//! array of `n_joints` coordinate arrays of length `dims` in joint order. Numbers
//! are written with shortest round-trip formatting so reloading is bit-exact.
//!
//! Confidence tracks use the same framing with schema `poseconf/1` and one array
//! of `n_joints` values per frame.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEQUENCE_SCHEMA: &str = "poseseq/1";
pub const CONFIDENCE_SCHEMA: &str = "poseconf/1";

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    pub name: &'static str,
    pub n_joints: usize,
    /// Parent of every joint; the root is its own parent.
    pub parent: Vec<usize>,
    pub root: usize,
    pub body_parts: BTreeMap<&'static str, Vec<usize>>,
    /// Length of the bone from each joint to its parent, root entry is 0.
    pub bone_lengths_mm: Option<Vec<f64>>,
    /// Unit direction of each bone in the rest pose (world frame, y up,
    /// subject facing -z). Root entry is zero.
    pub rest_directions: Vec<[f64; 3]>,
}

impl SkeletonTopology {
    pub fn part(&self, name: &str) -> Result<&[usize]> {
        self.body_parts
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownPart {
                part: name.to_string(),
                topology: self.name.to_string(),
                valid: self.body_parts.keys().map(|k| k.to_string()).collect(),
            })
    }

    pub fn children(&self, joint: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_joints).filter(move |&j| j != self.root && self.parent[j] == joint)
    }

    /// Joints ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut order = vec![self.root];
        let mut i = 0;
        while i < order.len() {
            let j = order[i];
            order.extend(self.children(j));
            i += 1;
        }
        order
    }

    /// Checks the structural invariants: a single tree rooted at `root` and
    /// valid, non-empty body parts.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_joints;
        let bad = |msg: String| Err(Error::InvalidConfig(format!("topology {}: {msg}", self.name)));
        if n == 0 || self.parent.len() != n || self.root >= n || self.parent[self.root] != self.root {
            return bad("parent array malformed".into());
        }
        for start in 0..n {
            let mut j = start;
            let mut steps = 0;
            while j != self.root {
                j = self.parent[j];
                steps += 1;
                if j >= n || steps > n {
                    return bad(format!("joint {start} does not reach the root"));
                }
            }
        }
        for (name, joints) in &self.body_parts {
            if joints.is_empty() || joints.iter().any(|&j| j >= n) {
                return bad(format!("body part {name} invalid"));
            }
        }
        if let Some(b) = &self.bone_lengths_mm {
            if b.len() != n {
                return bad("bone length table has wrong size".into());
            }
        }
        if self.rest_directions.len() != n {
            return bad("rest direction table has wrong size".into());
        }
        Ok(())
    }
}

pub const TOPOLOGY_NAMES: [&str; 3] = ["h36m17", "sysu20", "ntu25"];

const UP: [f64; 3] = [0.0, 1.0, 0.0];
const DOWN: [f64; 3] = [0.0, -1.0, 0.0];
// Subject faces -z, so its left side is +x.
const LEFT: [f64; 3] = [1.0, 0.0, 0.0];
const RIGHT: [f64; 3] = [-1.0, 0.0, 0.0];
const NONE: [f64; 3] = [0.0, 0.0, 0.0];
const FORWARD: [f64; 3] = [0.0, 0.0, -1.0];

fn parts(entries: &[(&'static str, &[usize])]) -> BTreeMap<&'static str, Vec<usize>> {
    entries.iter().map(|(k, v)| (*k, v.to_vec())).collect()
}

fn h36m17() -> SkeletonTopology {
    SkeletonTopology {
        name: "h36m17",
        n_joints: 17,
        parent: vec![0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15],
        root: 0,
        body_parts: parts(&[
            ("LeftArm", &[11, 12, 13]),
            ("RightLeg", &[1, 2, 3]),
            ("Head", &[10]),
            ("LowerBody", &[2, 3, 5, 6]),
        ]),
        bone_lengths_mm: Some(vec![
            0.0, 132.0, 442.0, 454.0, 132.0, 442.0, 454.0, 233.0, 257.0, 121.0, 115.0, 151.0,
            278.0, 252.0, 151.0, 278.0, 252.0,
        ]),
        rest_directions: vec![
            NONE, RIGHT, DOWN, DOWN, LEFT, DOWN, DOWN, UP, UP, UP, UP, LEFT, DOWN, DOWN, RIGHT,
            DOWN, DOWN,
        ],
    }
}

fn sysu20() -> SkeletonTopology {
    SkeletonTopology {
        name: "sysu20",
        n_joints: 20,
        parent: vec![0, 0, 1, 2, 2, 4, 5, 6, 2, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18],
        root: 0,
        body_parts: parts(&[
            ("LeftArm", &[4, 5, 6]),
            ("RightLeg", &[16, 17, 18]),
            ("Head", &[3]),
            ("LowerBody", &[13, 14, 17, 18]),
        ]),
        bone_lengths_mm: Some(vec![
            0.0, 240.0, 250.0, 160.0, 170.0, 280.0, 250.0, 80.0, 170.0, 280.0, 250.0, 80.0,
            90.0, 420.0, 420.0, 120.0, 90.0, 420.0, 420.0, 120.0,
        ]),
        rest_directions: vec![
            NONE, UP, UP, UP, LEFT, DOWN, DOWN, DOWN, RIGHT, DOWN, DOWN, DOWN, LEFT, DOWN, DOWN,
            FORWARD, RIGHT, DOWN, DOWN, FORWARD,
        ],
    }
}

fn ntu25() -> SkeletonTopology {
    SkeletonTopology {
        name: "ntu25",
        n_joints: 25,
        parent: vec![
            0, 0, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18, 1, 7, 6, 11,
            10,
        ],
        root: 0,
        body_parts: parts(&[
            ("LeftArm", &[4, 5, 6]),
            ("RightLeg", &[16, 17, 18]),
            ("Head", &[3]),
            ("LowerBody", &[13, 14, 17, 18]),
        ]),
        bone_lengths_mm: Some(vec![
            0.0, 240.0, 80.0, 140.0, 170.0, 280.0, 250.0, 80.0, 170.0, 280.0, 250.0, 80.0, 90.0,
            420.0, 420.0, 120.0, 90.0, 420.0, 420.0, 120.0, 210.0, 60.0, 50.0, 60.0, 50.0,
        ]),
        rest_directions: vec![
            NONE, UP, UP, UP, LEFT, DOWN, DOWN, DOWN, RIGHT, DOWN, DOWN, DOWN, LEFT, DOWN, DOWN,
            FORWARD, RIGHT, DOWN, DOWN, FORWARD, UP, DOWN, FORWARD, DOWN, FORWARD,
        ],
    }
}

fn registry() -> &'static [SkeletonTopology; 3] {
    static REGISTRY: OnceLock<[SkeletonTopology; 3]> = OnceLock::new();
    REGISTRY.get_or_init(|| [h36m17(), sysu20(), ntu25()])
}

/// Looks up one of the built-in topologies (`h36m17`, `sysu20`, `ntu25`).
pub fn get_topology(name: &str) -> Result<&'static SkeletonTopology> {
    registry()
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::UnknownTopology {
            name: name.to_string(),
            valid: TOPOLOGY_NAMES.iter().map(|s| s.to_string()).collect(),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Units {
    #[serde(rename = "px")]
    Pixels,
    #[serde(rename = "mm")]
    Millimeters,
}

/// Frames of 2D or 3D joint coordinates, stored frame-major in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub topology: &'static SkeletonTopology,
    pub dims: usize,
    pub units: Units,
    pub fps: Option<f64>,
    pub action: Option<String>,
    pub subject: Option<String>,
    coords: Vec<f64>,
}

impl PoseSequence {
    pub fn new(
        topology: &'static SkeletonTopology,
        dims: usize,
        coords: Vec<f64>,
    ) -> Result<Self> {
        let units = if dims == 3 { Units::Millimeters } else { Units::Pixels };
        let seq = Self {
            topology,
            dims,
            units,
            fps: None,
            action: None,
            subject: None,
            coords,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn from_frames(
        topology: &'static SkeletonTopology,
        dims: usize,
        frames: &[Vec<f64>],
    ) -> Result<Self> {
        let stride = topology.n_joints * dims;
        for (f, frame) in frames.iter().enumerate() {
            if frame.len() != stride {
                return Err(Error::ShapeMismatch(format!(
                    "frame {f} has {} values, expected {stride}",
                    frame.len()
                )));
            }
        }
        Self::new(topology, dims, frames.concat())
    }

    pub fn with_fps(mut self, fps: f64) -> Self {
        self.fps = Some(fps);
        self
    }

    pub fn with_action(mut self, action: impl Into<String>) -> Self {
        self.action = Some(action.into());
        self
    }

    pub fn with_subject(mut self, subject: impl Into<String>) -> Self {
        self.subject = Some(subject.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::ShapeMismatch(format!("dims must be 2 or 3, got {}", self.dims)));
        }
        let stride = self.stride();
        if self.coords.is_empty() {
            return Err(Error::EmptySequence);
        }
        if self.coords.len() % stride != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} values is not a whole number of {stride}-value frames",
                self.coords.len()
            )));
        }
        if let Some(i) = self.coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                frame: i / stride,
                joint: (i % stride) / self.dims,
            });
        }
        Ok(())
    }

    pub fn n_joints(&self) -> usize {
        self.topology.n_joints
    }

    pub fn stride(&self) -> usize {
        self.topology.n_joints * self.dims
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.stride()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let s = self.stride();
        &self.coords[f * s..(f + 1) * s]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [f64] {
        let s = self.stride();
        &mut self.coords[f * s..(f + 1) * s]
    }

    pub fn joint(&self, f: usize, j: usize) -> &[f64] {
        let start = f * self.stride() + j * self.dims;
        &self.coords[start..start + self.dims]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.stride())
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Same metadata, new coordinates (validated).
    pub fn with_coords(&self, coords: Vec<f64>) -> Result<Self> {
        let seq = Self {
            coords,
            ..self.clone()
        };
        seq.validate()?;
        Ok(seq)
    }

    /// Copy of frames `range` with identical metadata.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let s = self.stride();
        self.with_coords(self.coords[start * s..end * s].to_vec())
    }
}

/// Per-frame, per-joint detector confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceTrack {
    pub n_joints: usize,
    values: Vec<f64>,
}

impl ConfidenceTrack {
    /// Builds a track; values are clamped to `[0, 1]`.
    pub fn new(n_joints: usize, values: Vec<f64>) -> Result<Self> {
        if n_joints == 0 || values.is_empty() || values.len() % n_joints != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} confidence values for {n_joints} joints",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                frame: i / n_joints,
                joint: i % n_joints,
            });
        }
        let values = values.into_iter().map(|c| c.clamp(0.0, 1.0)).collect();
        Ok(Self { n_joints, values })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.n_joints
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, f: usize, j: usize) -> f64 {
        self.values[f * self.n_joints + j]
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        &self.values[f * self.n_joints..(f + 1) * self.n_joints]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SequenceHeader {
    schema: String,
    topology: String,
    dims: usize,
    units: Units,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subject: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConfidenceHeader {
    schema: String,
    topology: String,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn check_schema(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Version {
            found: found.to_string(),
            expected: expected.to_string(),
        });
    }
    Ok(())
}

/// Non-empty lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

pub fn parse_sequence(text: &str) -> Result<PoseSequence> {
    let mut lines = content_lines(text);
    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
    let header: SequenceHeader =
        serde_json::from_str(header).map_err(|e| parse_err(hline, format!("header: {e}")))?;
    check_schema(&header.schema, SEQUENCE_SCHEMA)?;
    let topology = get_topology(&header.topology)?;
    let dims = header.dims;
    if dims != 2 && dims != 3 {
        return Err(parse_err(hline, format!("dims must be 2 or 3, got {dims}")));
    }
    let mut coords = Vec::new();
    for (frame, (line, body)) in lines.enumerate() {
        let joints: Vec<Vec<f64>> = serde_json::from_str(body)
            .map_err(|e| parse_err(line, format!("frame {frame}: {e}")))?;
        if joints.len() != topology.n_joints {
            return Err(Error::ShapeMismatch(format!(
                "frame {frame} (line {line}) has {} joints, expected {}",
                joints.len(),
                topology.n_joints
            )));
        }
        for (j, c) in joints.iter().enumerate() {
            if c.len() != dims {
                return Err(Error::ShapeMismatch(format!(
                    "frame {frame} (line {line}), joint {j} has {} coordinates, expected {dims}",
                    c.len()
                )));
            }
            coords.extend_from_slice(c);
        }
    }
    let mut seq = PoseSequence::new(topology, dims, coords)?;
    seq.units = header.units;
    seq.fps = header.fps;
    seq.action = header.action;
    seq.subject = header.subject;
    Ok(seq)
}

pub fn format_sequence(seq: &PoseSequence) -> Result<String> {
    seq.validate()?;
    let header = SequenceHeader {
        schema: SEQUENCE_SCHEMA.to_string(),
        topology: seq.topology.name.to_string(),
        dims: seq.dims,
        units: seq.units,
        fps: seq.fps,
        action: seq.action.clone(),
        subject: seq.subject.clone(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for frame in seq.frames() {
        let joints: Vec<&[f64]> = frame.chunks_exact(seq.dims).collect();
        out.push_str(&serde_json::to_string(&joints)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<PoseSequence> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_sequence(&text)
}

pub fn save_sequence(seq: &PoseSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = format_sequence(seq)?;
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| Error::file(path, e))?);
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn save_confidence(
    track: &ConfidenceTrack,
    topology: &SkeletonTopology,
    path: impl AsRef<Path>,
) -> Result<()> {
    if track.n_joints != topology.n_joints {
        return Err(Error::ShapeMismatch(format!(
            "confidence track has {} joints, topology {} has {}",
            track.n_joints, topology.name, topology.n_joints
        )));
    }
    let header = ConfidenceHeader {
        schema: CONFIDENCE_SCHEMA.to_string(),
        topology: topology.name.to_string(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for f in 0..track.len() {
        out.push_str(&serde_json::to_string(track.frame(f))?);
        out.push('\n');
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::file(path, e))
}

pub fn load_confidence(path: impl AsRef<Path>) -> Result<ConfidenceTrack> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut lines = content_lines(&text);
    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
    let header: ConfidenceHeader =
        serde_json::from_str(header).map_err(|e| parse_err(hline, format!("header: {e}")))?;
    check_schema(&header.schema, CONFIDENCE_SCHEMA)?;
    let n = get_topology(&header.topology)?.n_joints;
    let mut values = Vec::new();
    for (frame, (line, body)) in lines.enumerate() {
        let row: Vec<f64> = serde_json::from_str(body)
            .map_err(|e| parse_err(line, format!("frame {frame}: {e}")))?;
        if row.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "confidence frame {frame} (line {line}) has {} joints, expected {n}",
                row.len()
            )));
        }
        values.extend(row);
    }
    ConfidenceTrack::new(n, values)
}
