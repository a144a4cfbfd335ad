//! Occlusion masks and the guided network input.
//!
//! Masks are pure functions of `(seed, arguments)` drawn from [`SplitMix64`].
//! Random-k masks resample the missing joint set independently for every
//! frame, consuming `k` draws of `below` per frame (partial Fisher-Yates over
//! `0..n_joints`). Frame blackouts draw their start once with
//! `below(frames - t + 1)`.
//!
//! The guided encoding interleaves, per joint in topology order, the quadruple
//! `(x * [m_x != 0], y * [m_y != 0], m_x, m_y)`. Masked joints therefore carry
//! no coordinate information at all.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::skeleton::{ConfidenceTrack, PoseSequence, SkeletonTopology};

pub const MASK_SCHEMA: &str = "occmask/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OcclusionScheme {
    None,
    RandomK { k: usize },
    BodyPart { part: String },
    FrameBlackout { t: usize, start: usize },
}

impl fmt::Display for OcclusionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OcclusionScheme::None => write!(f, "none"),
            OcclusionScheme::RandomK { k } => write!(f, "rand{k}"),
            OcclusionScheme::BodyPart { part } => write!(f, "part:{part}"),
            OcclusionScheme::FrameBlackout { t, .. } => write!(f, "t{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionMask {
    pub frames: usize,
    pub n_joints: usize,
    pub seed: u64,
    pub scheme: OcclusionScheme,
    present: Vec<bool>,
}

impl OcclusionMask {
    pub fn all_present(frames: usize, n_joints: usize) -> Self {
        Self {
            frames,
            n_joints,
            seed: 0,
            scheme: OcclusionScheme::None,
            present: vec![true; frames * n_joints],
        }
    }

    pub fn from_grid(
        frames: usize,
        n_joints: usize,
        present: Vec<bool>,
        seed: u64,
        scheme: OcclusionScheme,
    ) -> Result<Self> {
        if present.len() != frames * n_joints {
            return Err(Error::ShapeMismatch(format!(
                "mask grid has {} entries, expected {frames}x{n_joints}",
                present.len()
            )));
        }
        Ok(Self {
            frames,
            n_joints,
            seed,
            scheme,
            present,
        })
    }

    pub fn is_present(&self, frame: usize, joint: usize) -> bool {
        self.present[frame * self.n_joints + joint]
    }

    pub fn frame(&self, frame: usize) -> &[bool] {
        &self.present[frame * self.n_joints..(frame + 1) * self.n_joints]
    }

    pub fn missing_in_frame(&self, frame: usize) -> usize {
        self.frame(frame).iter().filter(|p| !**p).count()
    }

    pub fn grid(&self) -> &[bool] {
        &self.present
    }

    /// Compact byte form (one `0`/`1` per entry), handy for exact comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.present.iter().map(|&p| if p { b'1' } else { b'0' }).collect()
    }

    /// Same availability grid, different provenance is irrelevant.
    pub fn same_grid(&self, other: &Self) -> bool {
        self.frames == other.frames && self.n_joints == other.n_joints && self.present == other.present
    }
}

pub fn random_k_mask(
    seed: u64,
    frames: usize,
    topology: &SkeletonTopology,
    k: usize,
) -> Result<OcclusionMask> {
    let n = topology.n_joints;
    if k >= n {
        return Err(Error::OutOfRange {
            what: "k",
            value: k as f64,
            min: 0.0,
            max: (n - 1) as f64,
        });
    }
    let mut rng = SplitMix64::new(seed);
    let mut present = vec![true; frames * n];
    for f in 0..frames {
        for j in rng.sample_without_replacement(n, k) {
            present[f * n + j] = false;
        }
    }
    OcclusionMask::from_grid(frames, n, present, seed, OcclusionScheme::RandomK { k })
}

pub fn body_part_mask(
    frames: usize,
    topology: &SkeletonTopology,
    part: &str,
) -> Result<OcclusionMask> {
    let joints = topology.part(part)?;
    let n = topology.n_joints;
    let mut present = vec![true; frames * n];
    for f in 0..frames {
        for &j in joints {
            present[f * n + j] = false;
        }
    }
    OcclusionMask::from_grid(
        frames,
        n,
        present,
        0,
        OcclusionScheme::BodyPart {
            part: part.to_string(),
        },
    )
}

/// Blackout of `t` consecutive frames starting at a seeded uniform position.
pub fn frame_blackout_mask(
    seed: u64,
    frames: usize,
    topology: &SkeletonTopology,
    t: usize,
) -> Result<OcclusionMask> {
    check_blackout_len(frames, t)?;
    let start = SplitMix64::new(seed).below(frames - t + 1);
    let mut mask = frame_blackout_mask_at(frames, topology, t, start)?;
    mask.seed = seed;
    Ok(mask)
}

/// Blackout of frames `start..start + t`.
pub fn frame_blackout_mask_at(
    frames: usize,
    topology: &SkeletonTopology,
    t: usize,
    start: usize,
) -> Result<OcclusionMask> {
    check_blackout_len(frames, t)?;
    if start + t > frames {
        return Err(Error::OutOfRange {
            what: "blackout start",
            value: start as f64,
            min: 0.0,
            max: (frames - t) as f64,
        });
    }
    let n = topology.n_joints;
    let mut present = vec![true; frames * n];
    present[start * n..(start + t) * n].fill(false);
    OcclusionMask::from_grid(frames, n, present, 0, OcclusionScheme::FrameBlackout { t, start })
}

fn check_blackout_len(frames: usize, t: usize) -> Result<()> {
    if t == 0 || t > frames {
        return Err(Error::OutOfRange {
            what: "t",
            value: t as f64,
            min: 1.0,
            max: frames as f64,
        });
    }
    Ok(())
}

/// Mask recipe independent of sequence length; evaluation sweeps are
/// parameterized by these and instantiate one mask per sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSpec {
    None,
    RandomK { k: usize },
    BodyPart { part: String },
    /// Seeded start when `start` is `None`.
    FrameBlackout { t: usize, start: Option<usize> },
}

impl MaskSpec {
    pub fn generate(&self, seed: u64, frames: usize, topology: &SkeletonTopology) -> Result<OcclusionMask> {
        match self {
            MaskSpec::None => Ok(OcclusionMask::all_present(frames, topology.n_joints)),
            MaskSpec::RandomK { k } => random_k_mask(seed, frames, topology, *k),
            MaskSpec::BodyPart { part } => body_part_mask(frames, topology, part),
            MaskSpec::FrameBlackout { t, start: None } => frame_blackout_mask(seed, frames, topology, *t),
            MaskSpec::FrameBlackout { t, start: Some(s) } => frame_blackout_mask_at(frames, topology, *t, *s),
        }
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskSpec::None => write!(f, "none"),
            MaskSpec::RandomK { k } => write!(f, "rand{k}"),
            MaskSpec::BodyPart { part } => write!(f, "{part}"),
            MaskSpec::FrameBlackout { t, .. } => write!(f, "t{t}"),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskHeader {
    schema: String,
    scheme: OcclusionScheme,
    seed: u64,
    frames: usize,
    n_joints: usize,
}

pub fn format_mask(mask: &OcclusionMask) -> Result<String> {
    let header = MaskHeader {
        schema: MASK_SCHEMA.to_string(),
        scheme: mask.scheme.clone(),
        seed: mask.seed,
        frames: mask.frames,
        n_joints: mask.n_joints,
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for row in mask.to_bytes().chunks(mask.n_joints.max(1)) {
        out.push_str(std::str::from_utf8(row).expect("ascii"));
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_mask(text: &str) -> Result<OcclusionMask> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let header: MaskHeader = serde_json::from_str(header).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.schema != MASK_SCHEMA {
        return Err(Error::Version {
            found: header.schema,
            expected: MASK_SCHEMA.into(),
        });
    }
    let mut present = Vec::with_capacity(header.frames * header.n_joints);
    for (i, line) in lines {
        let row = line.trim();
        if row.len() != header.n_joints {
            return Err(Error::ShapeMismatch(format!(
                "mask line {} has {} entries, expected {}",
                i + 1,
                row.len(),
                header.n_joints
            )));
        }
        for c in row.bytes() {
            present.push(match c {
                b'1' => true,
                b'0' => false,
                _ => {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("unexpected character {:?}", c as char),
                    })
                }
            });
        }
    }
    OcclusionMask::from_grid(header.frames, header.n_joints, present, header.seed, header.scheme)
}

pub fn save_mask(mask: &OcclusionMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_mask(mask)?).map_err(|e| Error::file(path, e))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<OcclusionMask> {
    let path = path.as_ref();
    parse_mask(&fs::read_to_string(path).map_err(|e| Error::file(path, e))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    Binary,
    Confidence,
}

/// Guided network input: `frames` rows of `n_joints * 4` values.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedWindow {
    pub frames: usize,
    pub n_joints: usize,
    pub mode: GuidanceMode,
    data: Vec<f64>,
}

pub const GUIDED_DIMS: usize = 4;

impl GuidedWindow {
    pub fn channels(&self) -> usize {
        self.n_joints * GUIDED_DIMS
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        let c = self.channels();
        &self.data[frame * c..(frame + 1) * c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `len` frames starting at `start` (may be negative or run past the end);
    /// out-of-range frames replicate the nearest edge frame.
    pub fn window(&self, start: isize, len: usize) -> GuidedWindow {
        let c = self.channels();
        let last = self.frames as isize - 1;
        let mut data = Vec::with_capacity(len * c);
        for i in 0..len as isize {
            let f = (start + i).clamp(0, last) as usize;
            data.extend_from_slice(self.row(f));
        }
        GuidedWindow {
            frames: len,
            n_joints: self.n_joints,
            mode: self.mode,
            data,
        }
    }

    /// Channel-major network input `[n_joints * in_dims, frames]`. With
    /// `in_dims == 2` only the masked coordinates are kept (no guidance).
    pub fn to_channels_first(&self, in_dims: usize) -> Vec<f64> {
        assert!(in_dims == 2 || in_dims == GUIDED_DIMS);
        let rows = self.n_joints * in_dims;
        let mut out = vec![0.0; rows * self.frames];
        for f in 0..self.frames {
            let row = self.row(f);
            for j in 0..self.n_joints {
                for d in 0..in_dims {
                    out[(j * in_dims + d) * self.frames + f] = row[j * GUIDED_DIMS + d];
                }
            }
        }
        out
    }

    /// Zeroes coordinates and indicators of joints the mask marks missing.
    pub fn occlude(&mut self, mask: &OcclusionMask) -> Result<()> {
        if mask.frames != self.frames || mask.n_joints != self.n_joints {
            return Err(Error::ShapeMismatch(format!(
                "mask is {}x{}, window is {}x{}",
                mask.frames, mask.n_joints, self.frames, self.n_joints
            )));
        }
        for f in 0..self.frames {
            for j in 0..self.n_joints {
                if !mask.is_present(f, j) {
                    let at = (f * self.n_joints + j) * GUIDED_DIMS;
                    self.data[at..at + GUIDED_DIMS].fill(0.0);
                }
            }
        }
        Ok(())
    }
}

/// Encodes a 2D sequence with its mask (and optional confidences) into the
/// guided representation. With `conf` present the indicator carries the
/// confidence value; joints flagged missing by the mask get 0 regardless.
pub fn apply_guidance(
    seq: &PoseSequence,
    mask: &OcclusionMask,
    conf: Option<&ConfidenceTrack>,
) -> Result<GuidedWindow> {
    if seq.dims != 2 {
        return Err(Error::ShapeMismatch(format!(
            "guidance needs a 2D sequence, got dims={}",
            seq.dims
        )));
    }
    let n = seq.n_joints();
    if mask.frames != seq.len() || mask.n_joints != n {
        return Err(Error::ShapeMismatch(format!(
            "mask is {}x{}, sequence is {}x{n}",
            mask.frames,
            mask.n_joints,
            seq.len()
        )));
    }
    if let Some(c) = conf {
        if c.len() != seq.len() || c.n_joints != n {
            return Err(Error::ShapeMismatch(format!(
                "confidence track is {}x{}, sequence is {}x{n}",
                c.len(),
                c.n_joints,
                seq.len()
            )));
        }
    }
    let mut data = Vec::with_capacity(seq.len() * n * GUIDED_DIMS);
    for f in 0..seq.len() {
        for j in 0..n {
            let m = match (mask.is_present(f, j), conf) {
                (false, _) => 0.0,
                (true, None) => 1.0,
                (true, Some(c)) => c.get(f, j),
            };
            let p = seq.joint(f, j);
            let keep = if m != 0.0 { 1.0 } else { 0.0 };
            data.extend_from_slice(&[p[0] * keep, p[1] * keep, m, m]);
        }
    }
    Ok(GuidedWindow {
        frames: seq.len(),
        n_joints: n,
        mode: if conf.is_some() {
            GuidanceMode::Confidence
        } else {
            GuidanceMode::Binary
        },
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::get_topology;

    fn h36m() -> &'static SkeletonTopology {
        get_topology("h36m17").unwrap()
    }

    #[test]
    fn k16_leaves_one_joint() {
        let m = random_k_mask(1, 5, h36m(), 16).unwrap();
        for f in 0..5 {
            assert_eq!(m.frame(f).iter().filter(|p| **p).count(), 1);
        }
    }

    #[test]
    fn k0_is_all_present() {
        let m = random_k_mask(1, 5, h36m(), 0).unwrap();
        assert!(m.same_grid(&OcclusionMask::all_present(5, 17)));
    }

    #[test]
    fn k_out_of_range() {
        assert!(matches!(
            random_k_mask(1, 5, h36m(), 17),
            Err(Error::OutOfRange { what: "k", .. })
        ));
    }

    #[test]
    fn seeds_matter_and_repeat() {
        let a = random_k_mask(7, 20, h36m(), 4).unwrap();
        let b = random_k_mask(8, 20, h36m(), 4).unwrap();
        let c = random_k_mask(7, 20, h36m(), 4).unwrap();
        assert_ne!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn body_parts() {
        let m = body_part_mask(10, h36m(), "LowerBody").unwrap();
        for f in 0..10 {
            assert_eq!(m.missing_in_frame(f), 4);
            for &j in &[2, 3, 5, 6] {
                assert!(!m.is_present(f, j));
            }
        }
        let head = body_part_mask(10, h36m(), "Head").unwrap();
        assert!((0..10).all(|f| head.missing_in_frame(f) == 1));
        assert!(matches!(
            body_part_mask(10, h36m(), "Tail"),
            Err(Error::UnknownPart { .. })
        ));
    }

    #[test]
    fn blackout_run() {
        let m = frame_blackout_mask(3, 50, h36m(), 3).unwrap();
        let dark: Vec<usize> = (0..50).filter(|&f| m.missing_in_frame(f) == 17).collect();
        let lit = (0..50).filter(|&f| m.missing_in_frame(f) == 0).count();
        assert_eq!(dark.len(), 3);
        assert_eq!(dark[2] - dark[0], 2);
        assert_eq!(lit, 47);

        let all = frame_blackout_mask(3, 12, h36m(), 12).unwrap();
        assert!(all.grid().iter().all(|p| !p));
        assert!(frame_blackout_mask(3, 12, h36m(), 0).is_err());
        assert!(frame_blackout_mask_at(12, h36m(), 3, 10).is_err());
    }

    fn one_joint_seq(x: f64, y: f64) -> PoseSequence {
        let mut coords = vec![0.0; 34];
        coords[0] = x;
        coords[1] = y;
        PoseSequence::new(h36m(), 2, coords).unwrap()
    }

    #[test]
    fn encoding_contract() {
        let seq = one_joint_seq(100.0, 200.0);
        let present = OcclusionMask::all_present(1, 17);
        let g = apply_guidance(&seq, &present, None).unwrap();
        assert_eq!(&g.row(0)[..4], &[100.0, 200.0, 1.0, 1.0]);
        assert_eq!(g.channels(), 2 * (2 * 17));

        let mut grid = vec![true; 17];
        grid[0] = false;
        let masked = OcclusionMask::from_grid(1, 17, grid, 0, OcclusionScheme::None).unwrap();
        let g = apply_guidance(&seq, &masked, None).unwrap();
        assert_eq!(&g.row(0)[..4], &[0.0, 0.0, 0.0, 0.0]);

        let mut c = vec![1.0; 17];
        c[0] = 0.73;
        let conf = ConfidenceTrack::new(17, c).unwrap();
        let g = apply_guidance(&seq, &present, Some(&conf)).unwrap();
        assert_eq!(&g.row(0)[..4], &[100.0, 200.0, 0.73, 0.73]);
        assert_eq!(g.mode, GuidanceMode::Confidence);
        // Mask wins over confidence.
        let g = apply_guidance(&seq, &masked, Some(&conf)).unwrap();
        assert_eq!(&g.row(0)[..4], &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch() {
        let seq = one_joint_seq(1.0, 2.0);
        let mask = OcclusionMask::all_present(2, 17);
        assert!(matches!(apply_guidance(&seq, &mask, None), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn window_replicates_edges() {
        let t = h36m();
        let coords: Vec<f64> = (0..3 * 34).map(|i| (i / 34) as f64).collect();
        let seq = PoseSequence::new(t, 2, coords).unwrap();
        let g = apply_guidance(&seq, &OcclusionMask::all_present(3, 17), None).unwrap();
        let w = g.window(-2, 7);
        let firsts: Vec<f64> = (0..7).map(|f| w.row(f)[0]).collect();
        assert_eq!(firsts, vec![0.0, 0.0, 0.0, 1.0, 2.0, 2.0, 2.0]);
        let cf = g.to_channels_first(2);
        assert_eq!(cf.len(), 34 * 3);
        assert_eq!(&cf[..3], &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn occlude_matches_masked_encoding() {
        let t = h36m();
        let coords: Vec<f64> = (0..5 * 34).map(|i| i as f64 * 0.37 - 20.0).collect();
        let seq = PoseSequence::new(t, 2, coords).unwrap();
        let mask = random_k_mask(3, 5, t, 6).unwrap();
        let mut g = apply_guidance(&seq, &OcclusionMask::all_present(5, 17), None).unwrap();
        g.occlude(&mask).unwrap();
        assert_eq!(g, apply_guidance(&seq, &mask, None).unwrap());
        assert!(g.occlude(&OcclusionMask::all_present(4, 17)).is_err());
    }

    #[test]
    fn mask_file_round_trip() {
        let m = frame_blackout_mask(9, 30, h36m(), 5).unwrap();
        let back = parse_mask(&format_mask(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let r = random_k_mask(2, 4, h36m(), 3).unwrap();
        let text = format_mask(&r).unwrap();
        assert!(text.starts_with("{\"schema\":\"occmask/1\""));
        assert_eq!(parse_mask(&text).unwrap(), r);
    }
}
