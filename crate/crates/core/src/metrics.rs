//! Mean per-joint position error under root alignment (protocol 1) and
//! similarity Procrustes alignment (protocol 2), plus dataset evaluation.
//!
//! Poses are flat `n_joints * 3` slices in millimeters.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PairedSequence;
use crate::error::{Error, Result};
use crate::lifter::PosePredictor;
use crate::occlusion::MaskSpec;
use crate::rng::SplitMix64;
use crate::skeleton::{PoseSequence, SkeletonTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Protocol {
    RootAligned,
    Procrustes,
}

impl Protocol {
    pub fn number(self) -> u8 {
        match self {
            Protocol::RootAligned => 1,
            Protocol::Procrustes => 2,
        }
    }
}

impl TryFrom<u8> for Protocol {
    type Error = Error;

    fn try_from(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Protocol::RootAligned),
            2 => Ok(Protocol::Procrustes),
            _ => Err(Error::OutOfRange {
                what: "protocol",
                value: n as f64,
                min: 1.0,
                max: 2.0,
            }),
        }
    }
}

impl From<Protocol> for u8 {
    fn from(p: Protocol) -> u8 {
        p.number()
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.number())
    }
}

fn check_pair(pred: &[f64], gt: &[f64]) -> Result<usize> {
    if pred.len() != gt.len() || pred.is_empty() || pred.len() % 3 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "pose pair has {} and {} values; need equal non-empty multiples of 3",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred.len() / 3)
}

/// Mean Euclidean distance between corresponding joints.
pub fn mean_joint_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() / 3;
    a.chunks_exact(3)
        .zip(b.chunks_exact(3))
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        .sum::<f64>()
        / n as f64
}

/// Both poses translated so their roots sit at the origin.
pub fn mpjpe_p1(pred: &[f64], gt: &[f64], topology: &SkeletonTopology) -> Result<f64> {
    let n = check_pair(pred, gt)?;
    if n != topology.n_joints {
        return Err(Error::ShapeMismatch(format!(
            "{n} joints given for topology {} with {}",
            topology.name, topology.n_joints
        )));
    }
    let r = topology.root * 3;
    let mut total = 0.0;
    for j in 0..n {
        let mut sq = 0.0;
        for d in 0..3 {
            let a = pred[j * 3 + d] - pred[r + d];
            let b = gt[j * 3 + d] - gt[r + d];
            sq += (a - b) * (a - b);
        }
        total += sq.sqrt();
    }
    Ok(total / n as f64)
}

/// Similarity transform mapping the prediction onto the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub aligned: Vec<f64>,
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Collinear or coincident points: the rotation is not unique.
    pub degenerate: bool,
}

fn points(p: &[f64]) -> Vec<Vector3<f64>> {
    p.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

fn centroid(ps: &[Vector3<f64>]) -> Vector3<f64> {
    ps.iter().sum::<Vector3<f64>>() / ps.len() as f64
}

/// Least-squares `s R x + t` with `R` a proper rotation: SVD of the
/// cross-covariance `sum (y - mu_y)(x - mu_x)^T = U S V^T`, sign of the
/// smallest singular direction flipped when `det(U V^T) < 0`, and
/// `s = tr(S D) / sum |x - mu_x|^2`.
pub fn procrustes_align(pred: &[f64], gt: &[f64]) -> Result<Alignment> {
    check_pair(pred, gt)?;
    let x = points(pred);
    let y = points(gt);
    let mu_x = centroid(&x);
    let mu_y = centroid(&y);
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (xi, yi) in x.iter().zip(&y) {
        let xc = xi - mu_x;
        cov += (yi - mu_y) * xc.transpose();
        var_x += xc.norm_squared();
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let s = svd.singular_values;
    let smallest = (0..3).min_by(|&a, &b| s[a].total_cmp(&s[b])).expect("three values");
    let largest = s.max();
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        d[smallest] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&d) * v_t;
    let middle = s.sum() - largest - s[smallest];
    let degenerate = var_x <= 1e-12 || middle <= 1e-9 * largest;
    let scale = if var_x > 0.0 { s.dot(&d) / var_x } else { 0.0 };
    let translation = mu_y - scale * rotation * mu_x;
    let aligned = x
        .iter()
        .flat_map(|xi| {
            let p = scale * rotation * xi + translation;
            [p.x, p.y, p.z]
        })
        .collect();
    Ok(Alignment {
        aligned,
        scale,
        rotation,
        translation,
        degenerate,
    })
}

pub fn mpjpe_p2(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let a = procrustes_align(pred, gt)?;
    Ok(mean_joint_distance(&a.aligned, gt))
}

pub fn mpjpe(pred: &[f64], gt: &[f64], topology: &SkeletonTopology, protocol: Protocol) -> Result<f64> {
    match protocol {
        Protocol::RootAligned => mpjpe_p1(pred, gt, topology),
        Protocol::Procrustes => mpjpe_p2(pred, gt),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameError {
    pub sequence: String,
    pub action: String,
    pub frame: usize,
    pub error_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionMean {
    pub mean_mm: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub scheme: MaskSpec,
    pub sequence_length: usize,
    pub per_frame: Vec<FrameError>,
    pub per_action: BTreeMap<String, ActionMean>,
    pub overall_mm: f64,
}

impl EvalReport {
    /// Aggregates per-frame errors; the overall mean weights every frame equally.
    pub fn from_frames(
        protocol: Protocol,
        scheme: MaskSpec,
        sequence_length: usize,
        per_frame: Vec<FrameError>,
    ) -> Result<Self> {
        if per_frame.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for e in &per_frame {
            let s = sums.entry(e.action.clone()).or_default();
            s.0 += e.error_mm;
            s.1 += 1;
        }
        let per_action = sums
            .into_iter()
            .map(|(a, (sum, n))| {
                (
                    a,
                    ActionMean {
                        mean_mm: sum / n as f64,
                        frames: n,
                    },
                )
            })
            .collect();
        let overall_mm = per_frame.iter().map(|e| e.error_mm).sum::<f64>() / per_frame.len() as f64;
        Ok(Self {
            protocol,
            scheme,
            sequence_length,
            per_frame,
            per_action,
            overall_mm,
        })
    }
}

/// Per-frame errors of a predicted sequence against its ground truth.
pub fn score_sequence(pred: &PoseSequence, gt: &PoseSequence, protocol: Protocol) -> Result<Vec<f64>> {
    if pred.len() != gt.len() || pred.dims != 3 || gt.dims != 3 {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} frames (dims {}), ground truth {} (dims {})",
            pred.len(),
            pred.dims,
            gt.len(),
            gt.dims
        )));
    }
    (0..gt.len())
        .map(|f| mpjpe(pred.frame(f), gt.frame(f), gt.topology, protocol))
        .collect()
}

/// Masks every sequence under `scheme` (mask seed `derive(seed, index)`) and
/// predicts it. Sequences run in parallel; output follows dataset order.
pub fn masked_predictions<P: PosePredictor + ?Sized>(
    predictor: &P,
    dataset: &[PairedSequence],
    scheme: &MaskSpec,
    seed: u64,
) -> Result<Vec<PoseSequence>> {
    dataset
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let mask = scheme.generate(SplitMix64::derive(seed, i as u64), pair.len(), pair.input2d.topology)?;
            predictor.predict(&pair.input2d, &mask, None)
        })
        .collect()
}

/// Scores [`masked_predictions`] frame by frame.
pub fn evaluate<P: PosePredictor + ?Sized>(
    predictor: &P,
    dataset: &[PairedSequence],
    protocol: Protocol,
    scheme: &MaskSpec,
    seed: u64,
) -> Result<EvalReport> {
    let predictions = masked_predictions(predictor, dataset, scheme, seed)?;
    let scored: Vec<Result<Vec<f64>>> = predictions
        .par_iter()
        .zip(dataset)
        .map(|(pred, pair)| score_sequence(pred, &pair.target3d, protocol))
        .collect();
    let mut per_frame = Vec::new();
    for (s, pair) in scored.into_iter().zip(dataset) {
        per_frame.extend(s?.into_iter().enumerate().map(|(frame, error_mm)| FrameError {
            sequence: pair.name.clone(),
            action: pair.action.clone(),
            frame,
            error_mm,
        }));
    }
    EvalReport::from_frames(protocol, scheme.clone(), predictor.receptive_field(), per_frame)
}

/// Rows of labelled values under named columns, written as CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportTable {
    pub row_header: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl ReportTable {
    pub fn new(row_header: impl Into<String>, columns: Vec<String>) -> Self {
        Self {
            row_header: row_header.into(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::ShapeMismatch(format!(
                "row has {} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        self.rows.push((label.into(), values));
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::InvalidConfig(format!("csv: {e}"));
        w.write_record(std::iter::once(&self.row_header).chain(&self.columns)).map_err(io)?;
        for (label, values) in &self.rows {
            let cells = std::iter::once(label.clone()).chain(values.iter().map(|v| format!("{v:.4}")));
            w.write_record(cells).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}
