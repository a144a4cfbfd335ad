//! Pose quality measured through action classification.
//!
//! Frames are normalized by subtracting the joint mean and dividing by the
//! Frobenius norm of the centered frame. A sequence becomes a three-channel
//! image with joints along rows and frames along columns, min-max scaled to
//! `[0, 255]` and bilinearly resampled to `S x S`.
//!
//! Classifier (columns are the time axis, each of the `3 S` channel-rows is an
//! input channel):
//!
//! | layer | shape |
//! |---|---|
//! | input | `[3 S, S]`, values `v / 255 - 0.5` |
//! | conv unit | `3 S -> 48`, kernel 3 |
//! | conv unit | `48 -> 48`, kernel 3, dilation 2 |
//! | global average pool | `48` |
//! | linear | `48 -> classes` |
//!
//! Conv units are conv, batch norm, Mish. At `S = 224` and 8 classes this is
//! 104,360 parameters.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::SplitMix64;
use crate::skeleton::PoseSequence;
use crate::tensor::{
    global_avg_pool, global_avg_pool_backward, softmax_cross_entropy, Conv1d, ConvUnit, Mode, Parameter, Tensor,
};

pub const DEFAULT_IMAGE_SIZE: usize = 224;
const NORM_EPS: f64 = 1e-8;
const WIDTH: usize = 48;
const BATCH: usize = 16;

/// Per-frame normalization of `n_p * 3` values. The root offset is removed
/// first (exact under translation), then the joint mean; the result is divided
/// by its Frobenius norm, or zeroed when that norm is below `1e-8`.
pub fn normalize_frame(frame: &[f64]) -> Vec<f64> {
    assert!(frame.len() >= 3 && frame.len() % 3 == 0, "frame must hold xyz triples");
    let n = (frame.len() / 3) as f64;
    let rel: Vec<f64> = frame.chunks_exact(3).flat_map(|p| [p[0] - frame[0], p[1] - frame[1], p[2] - frame[2]]).collect();
    let mut mean = [0.0; 3];
    for p in rel.chunks_exact(3) {
        for d in 0..3 {
            mean[d] += p[d];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let centered: Vec<f64> = rel.chunks_exact(3).flat_map(|p| [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]]).collect();
    let sigma = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    if sigma < NORM_EPS {
        return vec![0.0; frame.len()];
    }
    centered.iter().map(|v| v / sigma).collect()
}

/// An `S x S` three-channel image in `[0, 255]`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub size: usize,
    pub label: usize,
    pub data: Vec<f64>,
}

impl EncodedSample {
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * self.size + row) * self.size + col]
    }
}

/// Encodes a 3D sequence. Zero-range samples map to 128 everywhere.
pub fn encode(seq3d: &PoseSequence, size: usize, label: usize) -> Result<EncodedSample> {
    if seq3d.dims != 3 {
        return Err(Error::ShapeMismatch(format!("encoding needs 3D poses, got dims={}", seq3d.dims)));
    }
    if seq3d.is_empty() {
        return Err(Error::EmptySequence);
    }
    if size == 0 {
        return Err(Error::InvalidConfig("image size must be positive".into()));
    }
    let (j, f) = (seq3d.n_joints(), seq3d.len());
    // grid[c][joint][frame]
    let mut grid = vec![0.0; 3 * j * f];
    for (t, frame) in seq3d.frames().enumerate() {
        for (i, p) in normalize_frame(frame).chunks_exact(3).enumerate() {
            for c in 0..3 {
                grid[(c * j + i) * f + t] = p[c];
            }
        }
    }
    let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let scaled: Vec<f64> = if range > 0.0 {
        grid.iter().map(|v| (v - lo) / range * 255.0).collect()
    } else {
        vec![128.0; grid.len()]
    };
    let rows = taps(j, size);
    let cols = taps(f, size);
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let plane = &scaled[c * j * f..(c + 1) * j * f];
        for &(r0, r1, wr) in &rows {
            for &(c0, c1, wc) in &cols {
                let top = plane[r0 * f + c0] * (1.0 - wc) + plane[r0 * f + c1] * wc;
                let bottom = plane[r1 * f + c0] * (1.0 - wc) + plane[r1 * f + c1] * wc;
                data.push((top * (1.0 - wr) + bottom * wr).clamp(0.0, 255.0));
            }
        }
    }
    Ok(EncodedSample { size, label, data })
}

/// Bilinear taps with half-pixel centers: output `o` samples input position
/// `(o + 0.5) * n / size - 0.5`, clamped to the valid range.
fn taps(n: usize, size: usize) -> Vec<(usize, usize, f64)> {
    (0..size)
        .map(|o| {
            let x = ((o as f64 + 0.5) * n as f64 / size as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(n - 1);
            (x0, x1, x - x0 as f64)
        })
        .collect()
}

/// Non-overlapping clips of `frames` frames; a shorter tail is dropped.
pub fn clips(seq: &PoseSequence, frames: usize) -> Result<Vec<PoseSequence>> {
    if frames == 0 {
        return Err(Error::InvalidConfig("clip length must be positive".into()));
    }
    (0..seq.len() / frames).map(|i| seq.slice(i * frames, (i + 1) * frames)).collect()
}

/// Encodes every sequence (in parallel) as clips of `clip_frames`.
pub fn encode_all(seqs: &[(&PoseSequence, usize)], clip_frames: usize, size: usize) -> Result<Vec<EncodedSample>> {
    let nested: Vec<Result<Vec<EncodedSample>>> = seqs
        .par_iter()
        .map(|&(seq, label)| clips(seq, clip_frames)?.iter().map(|c| encode(c, size, label)).collect())
        .collect();
    let mut out = Vec::new();
    for n in nested {
        out.extend(n?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Classifier {
    size: usize,
    classes: usize,
    first: ConvUnit<f32>,
    second: ConvUnit<f32>,
    head: Conv1d<f32>,
}

impl Classifier {
    pub fn new(size: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::SingleClass(classes));
        }
        if size < 5 {
            return Err(Error::InvalidConfig(format!("image size {size} is below the classifier's 5-column span")));
        }
        let mut rng = SplitMix64::new(seed);
        Ok(Self {
            size,
            classes,
            first: ConvUnit::new("first", 3 * size, WIDTH, 3, 1, 0.0, &mut rng),
            second: ConvUnit::new("second", WIDTH, WIDTH, 3, 2, 0.0, &mut rng),
            head: Conv1d::new("head", WIDTH, classes, 1, 1, &mut rng),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    fn parameters(&self) -> Vec<&Parameter<f32>> {
        let mut out: Vec<&Parameter<f32>> = self.first.parameters().into();
        out.extend(self.second.parameters());
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<f32>> {
        let mut out: Vec<&mut Parameter<f32>> = self.first.parameters_mut().into();
        out.extend(self.second.parameters_mut());
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Flat parameter values, for reproducibility checks.
    pub fn parameter_values(&self) -> Vec<f32> {
        self.parameters().iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    fn batch(&self, samples: &[&EncodedSample]) -> Result<Tensor<f32>> {
        let s = self.size;
        let mut data = Vec::with_capacity(samples.len() * 3 * s * s);
        for x in samples {
            if x.size != s {
                return Err(Error::ShapeMismatch(format!("sample is {0}x{0}, classifier expects {s}x{s}", x.size)));
            }
            data.extend(x.data.iter().map(|v| (v / 255.0 - 0.5) as f32));
        }
        Tensor::from_vec(&[samples.len(), 3 * s, s], data)
    }

    fn logits(&self, x: &Tensor<f32>) -> Result<Vec<f64>> {
        let h = self.second.infer(&self.first.infer(x)?)?;
        Ok(self.head.infer(&global_avg_pool(&h)?)?.to_f64_vec())
    }

    pub fn classify(&self, sample: &EncodedSample) -> Result<usize> {
        let logits = self.logits(&self.batch(&[sample])?)?;
        Ok(argmax(&logits))
    }

    /// Fraction of samples classified correctly.
    pub fn accuracy(&self, samples: &[EncodedSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let correct: Vec<Result<usize>> = samples
            .par_chunks(64)
            .map(|chunk| {
                let refs: Vec<&EncodedSample> = chunk.iter().collect();
                let logits = self.logits(&self.batch(&refs)?)?;
                Ok(logits
                    .chunks_exact(self.classes)
                    .zip(chunk)
                    .filter(|(row, s)| argmax(row) == s.label)
                    .count())
            })
            .collect();
        let mut total = 0;
        for c in correct {
            total += c?;
        }
        Ok(total as f64 / samples.len() as f64)
    }

    fn train_step(&mut self, x: Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let h = self.first.forward(x, Mode::Train, 0)?;
        let h = self.second.forward(h, Mode::Train, 0)?;
        let len = h.shape()[2];
        let pooled = global_avg_pool(&h)?;
        let logits = self.head.forward(pooled, true)?;
        let (loss, grad) = softmax_cross_entropy(&logits.to_f64_vec(), self.classes, labels)?;
        let g = Tensor::from_f64(logits.shape(), &grad)?;
        let g = self.head.backward(&g, true)?.expect("input gradient requested");
        let g = global_avg_pool_backward(&g, len)?;
        let g = self.second.backward(g, true)?.expect("input gradient requested");
        self.first.backward(g, false)?;
        Ok(loss)
    }

    /// Exact average of batch statistics over `batches` at the final weights.
    fn recalibrate(&mut self, batches: &[Tensor<f32>]) -> Result<()> {
        for (i, x) in batches.iter().enumerate() {
            let m = 1.0 / (i + 1) as f64;
            self.first.bn.momentum = m;
            self.second.bn.momentum = m;
            let h = self.first.forward(x.clone(), Mode::Train, 0)?;
            self.second.forward(h, Mode::Train, 0)?;
        }
        let default = crate::tensor::BN_MOMENTUM;
        self.first.bn.momentum = default;
        self.second.bn.momentum = default;
        Ok(())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains a classifier with the lifter's Adam defaults, batches of 16 and
/// a seeded shuffle per epoch. Labels index classes `0..=max label`.
pub fn train_classifier(train: &[EncodedSample], seed: u64, epochs: usize) -> Result<Classifier> {
    let first = train.first().ok_or(Error::EmptyBatch)?;
    let classes = train.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let distinct = {
        let mut seen = vec![false; classes];
        train.iter().for_each(|s| seen[s.label] = true);
        seen.iter().filter(|&&b| b).count()
    };
    if distinct < 2 {
        return Err(Error::SingleClass(distinct));
    }
    if epochs == 0 {
        return Err(Error::InvalidConfig("classifier epochs must be positive".into()));
    }
    let mut clf = Classifier::new(first.size, classes, SplitMix64::derive(seed, 0))?;
    let mut opt = Adam::new(AdamConfig::default());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = SplitMix64::new(SplitMix64::derive(seed, 1));
    for epoch in 0..epochs {
        rng.shuffle(&mut order);
        for idx in order.chunks(BATCH).filter(|c| c.len() >= 2) {
            let refs: Vec<&EncodedSample> = idx.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|s| s.label).collect();
            let x = clf.batch(&refs)?;
            for p in clf.parameters_mut() {
                p.zero_grad();
            }
            let loss = clf.train_step(x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NanLoss {
                    epoch: epoch + 1,
                    step: 0,
                    last_loss: loss,
                });
            }
            opt.step(&mut clf.parameters_mut());
        }
    }
    let batches = train
        .chunks(BATCH)
        .filter(|c| c.len() >= 2)
        .map(|c| clf.batch(&c.iter().collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    clf.recalibrate(&batches)?;
    Ok(clf)
}
