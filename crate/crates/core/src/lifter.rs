//! Temporal dilated convolution network lifting guided 2D windows to 3D poses.
//!
//! Layout: an input unit (kernel `K`, dilation 1), `blocks` residual blocks
//! where block `b` (1-based) is a dilated unit (kernel `K`, dilation
//! `dilation_base^b`) followed by a pointwise unit, and a pointwise output
//! convolution producing `n_p * 3` coordinates per output frame. Every unit is
//! conv, batch norm, Mish, dropout. The skip path of a block is the block input
//! center-cropped to the block output length.
//!
//! 2D inputs are mapped to screen coordinates before guidance:
//! `u' = 2u / w - 1`, `v' = 2v / w - h / w`. Outputs are root-relative camera
//! frame coordinates in millimeters (network output times `output_scale_mm`).

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::occlusion::{apply_guidance, GuidedWindow, OcclusionMask, GUIDED_DIMS};
use crate::rng::SplitMix64;
use crate::skeleton::{get_topology, ConfidenceTrack, PoseSequence, SkeletonTopology};
use crate::tensor::{residual_add, residual_add_backward, Conv1d, ConvUnit, Mode, Parameter, Scalar, Tensor};

pub const CHECKPOINT_SCHEMA: &str = "occlift-ckpt/1";

/// Output frames computed per network call in [`LifterModel::predict_sequence`].
const PREDICT_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifterConfig {
    pub topology: String,
    /// 4 with guidance channels, 2 for the unguided baseline.
    pub in_dims_per_joint: usize,
    pub channels: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub dilation_base: usize,
    pub dropout_rate: f64,
    pub image_width: f64,
    pub image_height: f64,
    pub output_scale_mm: f64,
}

impl LifterConfig {
    /// 1024 channels, four blocks, kernel 3, dilation base 3 (243 frames).
    pub fn full_size(topology: &str, guided: bool) -> Self {
        Self {
            topology: topology.to_string(),
            in_dims_per_joint: if guided { GUIDED_DIMS } else { 2 },
            channels: 1024,
            blocks: 4,
            kernel: 3,
            dilation_base: 3,
            dropout_rate: 0.25,
            image_width: 1000.0,
            image_height: 1000.0,
            output_scale_mm: 1000.0,
        }
    }

    /// Desk-scale variant: 128 channels, three blocks (81 frames).
    pub fn toy(topology: &str, guided: bool) -> Self {
        Self {
            channels: 128,
            blocks: 3,
            ..Self::full_size(topology, guided)
        }
    }

    pub fn guided(&self) -> bool {
        self.in_dims_per_joint == GUIDED_DIMS
    }

    pub fn validate(&self) -> Result<&'static SkeletonTopology> {
        let topology = get_topology(&self.topology)?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.in_dims_per_joint != 2 && self.in_dims_per_joint != GUIDED_DIMS {
            return bad(format!("in_dims_per_joint must be 2 or 4, got {}", self.in_dims_per_joint));
        }
        if self.channels == 0 || self.kernel == 0 || self.dilation_base == 0 {
            return bad("channels, kernel and dilation_base must be at least 1".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0 && self.output_scale_mm > 0.0) {
            return bad("image size and output scale must be positive".into());
        }
        if checked_receptive_field(self).is_none() {
            return bad(format!(
                "receptive field overflows for {} blocks with base {}",
                self.blocks, self.dilation_base
            ));
        }
        Ok(topology)
    }

    fn dilation(&self, block: usize) -> usize {
        self.dilation_base.pow(block as u32)
    }
}

fn checked_receptive_field(config: &LifterConfig) -> Option<usize> {
    let mut rf = config.kernel;
    for b in 1..=config.blocks {
        let d = config.dilation_base.checked_pow(b as u32)?;
        rf = rf.checked_add((config.kernel - 1).checked_mul(d)?)?;
    }
    Some(rf)
}

/// `K + sum_{b=1..blocks} (K - 1) * base^b`.
pub fn receptive_field(config: &LifterConfig) -> usize {
    checked_receptive_field(config).expect("receptive field overflow")
}

/// Weights and biases of one residual block plus its two batch-norm scale/shift pairs.
pub fn block_parameter_count(config: &LifterConfig) -> usize {
    let c = config.channels;
    (c * c * config.kernel + c + 2 * c) + (c * c + c + 2 * c)
}

/// Closed-form count of every trainable scalar (running statistics excluded).
pub fn parameter_count(config: &LifterConfig) -> Result<usize> {
    let n_p = config.validate()?.n_joints;
    let c = config.channels;
    let input = n_p * config.in_dims_per_joint * c * config.kernel + c + 2 * c;
    let output = c * n_p * 3 + n_p * 3;
    Ok(input + config.blocks * block_parameter_count(config) + output)
}

/// Maps pixel coordinates to `[-1, 1]` horizontally, preserving aspect ratio.
pub fn normalize_screen(seq2d: &PoseSequence, width: f64, height: f64) -> Result<PoseSequence> {
    if seq2d.dims != 2 {
        return Err(Error::ShapeMismatch(format!(
            "screen normalization needs a 2D sequence, got dims={}",
            seq2d.dims
        )));
    }
    let coords = seq2d
        .coords()
        .chunks_exact(2)
        .flat_map(|p| [2.0 * p[0] / width - 1.0, 2.0 * p[1] / width - height / width])
        .collect();
    seq2d.with_coords(coords)
}

#[derive(Debug, Clone)]
struct Block<T> {
    dilated: ConvUnit<T>,
    pointwise: ConvUnit<T>,
    in_len: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct LifterModel<T = f32> {
    config: LifterConfig,
    topology: &'static SkeletonTopology,
    input: ConvUnit<T>,
    blocks: Vec<Block<T>>,
    output: Conv1d<T>,
    mode: Mode,
}

impl<T: Scalar> LifterModel<T> {
    /// Builds the network with deterministic seeded initialization; layers
    /// draw from one generator in construction order. Starts in eval mode.
    pub fn build(config: &LifterConfig, seed: u64) -> Result<Self> {
        let topology = config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let c = config.channels;
        let rate = config.dropout_rate;
        let c_in = topology.n_joints * config.in_dims_per_joint;
        let input = ConvUnit::new("input", c_in, c, config.kernel, 1, rate, &mut rng);
        let blocks = (1..=config.blocks)
            .map(|b| Block {
                dilated: ConvUnit::new(&format!("block{b}.dilated"), c, c, config.kernel, config.dilation(b), rate, &mut rng),
                pointwise: ConvUnit::new(&format!("block{b}.pointwise"), c, c, 1, 1, rate, &mut rng),
                in_len: None,
            })
            .collect();
        let output = Conv1d::new("output", c, topology.n_joints * 3, 1, 1, &mut rng);
        Ok(Self {
            config: config.clone(),
            topology,
            input,
            blocks,
            output,
            mode: Mode::Eval,
        })
    }

    pub fn config(&self) -> &LifterConfig {
        &self.config
    }

    pub fn topology(&self) -> &'static SkeletonTopology {
        self.topology
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.config)
    }

    pub fn input_channels(&self) -> usize {
        self.topology.n_joints * self.config.in_dims_per_joint
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out: Vec<&Parameter<T>> = self.input.parameters().into();
        for b in &self.blocks {
            out.extend(b.dilated.parameters());
            out.extend(b.pointwise.parameters());
        }
        out.push(&self.output.weight);
        out.push(&self.output.bias);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out: Vec<&mut Parameter<T>> = self.input.parameters_mut().into();
        for b in &mut self.blocks {
            out.extend(b.dilated.parameters_mut());
            out.extend(b.pointwise.parameters_mut());
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }

    /// Element-by-element count over the built parameter tensors.
    pub fn enumerated_parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.parameters_mut().into_iter().for_each(Parameter::zero_grad);
    }

    fn units(&self) -> Vec<&ConvUnit<T>> {
        let mut out = vec![&self.input];
        for b in &self.blocks {
            out.push(&b.dilated);
            out.push(&b.pointwise);
        }
        out
    }

    fn units_mut(&mut self) -> Vec<&mut ConvUnit<T>> {
        let mut out = vec![&mut self.input];
        for b in &mut self.blocks {
            out.push(&mut b.dilated);
            out.push(&mut b.pointwise);
        }
        out
    }

    /// Runs `[N, C_in, L]` through the network in the current mode and returns
    /// `[N, n_p * 3, L - RF + 1]` in millimeters. In train mode the
    /// activations needed by [`Self::backward`] are cached and dropout masks
    /// are drawn from streams derived from `seed`.
    pub fn forward_tensor(&mut self, x: Tensor<T>, seed: u64) -> Result<Tensor<T>> {
        self.check_input(&x)?;
        let mode = self.mode;
        let train = mode == Mode::Train;
        let mut h = self.input.forward(x, mode, SplitMix64::derive(seed, 0))?;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let s = 1 + 2 * i as u64;
            let y = b.dilated.forward(h.clone(), mode, SplitMix64::derive(seed, s))?;
            let y = b.pointwise.forward(y, mode, SplitMix64::derive(seed, s + 1))?;
            b.in_len = train.then(|| h.shape()[h.shape().len() - 1]);
            h = residual_add(&y, &h)?;
        }
        let y = self.output.forward(h, train)?;
        Ok(self.scale_output(y))
    }

    /// Replaces every batch-norm running estimate with the plain average of
    /// the batch statistics seen over `batches` at the current weights, with
    /// dropout disabled. Returns the number of batches used; with none the
    /// estimates are left untouched.
    pub fn recalibrate_batch_norm(&mut self, batches: impl IntoIterator<Item = Result<Tensor<T>>>) -> Result<usize> {
        let mode = self.mode;
        let saved: Vec<(f64, f64)> = self.units().iter().map(|u| (u.bn.momentum, u.dropout.rate)).collect();
        self.units_mut().into_iter().for_each(|u| u.dropout.rate = 0.0);
        self.mode = Mode::Train;
        let mut used = 0;
        let mut outcome = Ok(());
        for x in batches {
            used += 1;
            for u in self.units_mut() {
                u.bn.momentum = 1.0 / used as f64;
            }
            if let Err(e) = x.and_then(|x| self.forward_tensor(x, 0)) {
                outcome = Err(e);
                break;
            }
        }
        for (u, (momentum, rate)) in self.units_mut().into_iter().zip(saved) {
            u.bn.momentum = momentum;
            u.dropout.rate = rate;
        }
        self.mode = mode;
        outcome.map(|_| used)
    }

    /// Accumulates parameter gradients for `grad_out = d loss / d output`
    /// after a train-mode [`Self::forward_tensor`].
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<()> {
        let s = T::of(self.config.output_scale_mm);
        let g = grad_out.map(|v| v * s);
        let mut g = self
            .output
            .backward(&g, true)?
            .expect("input gradient requested");
        for b in self.blocks.iter_mut().rev() {
            let in_len = b
                .in_len
                .take()
                .ok_or_else(|| Error::InvalidConfig("backward needs a train-mode forward".into()))?;
            let skip = residual_add_backward(&g, in_len)?;
            let main = b.pointwise.backward(g, true)?.expect("input gradient requested");
            let main = b.dilated.backward(main, true)?.expect("input gradient requested");
            let mut sum = skip;
            for (a, &m) in sum.data_mut().iter_mut().zip(main.data()) {
                *a = *a + m;
            }
            g = sum;
        }
        self.input.backward(g, false)?;
        Ok(())
    }

    /// Eval-mode forward that leaves the model untouched.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = self.input.infer(x)?;
        for b in &self.blocks {
            let y = b.pointwise.infer(&b.dilated.infer(&h)?)?;
            h = residual_add(&y, &h)?;
        }
        Ok(self.scale_output(self.output.infer(&h)?))
    }

    fn scale_output(&self, y: Tensor<T>) -> Tensor<T> {
        let s = T::of(self.config.output_scale_mm);
        y.map(|v| v * s)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, l) = x.dims3("lifter")?;
        if c != self.input_channels() {
            return Err(Error::ShapeMismatch(format!(
                "lifter expects {} input channels, got {c}",
                self.input_channels()
            )));
        }
        let rf = self.receptive_field();
        if l < rf {
            return Err(Error::InputTooShort { required: rf, actual: l });
        }
        Ok(())
    }

    /// Stacks equally long windows into `[N, n_p * in_dims, f]`.
    pub fn input_tensor(&self, windows: &[GuidedWindow]) -> Result<Tensor<T>> {
        let first = windows.first().ok_or(Error::EmptyBatch)?;
        let (f, c) = (first.frames, self.input_channels());
        let mut data = Vec::with_capacity(windows.len() * c * f);
        for w in windows {
            if w.frames != f || w.n_joints != self.topology.n_joints {
                return Err(Error::ShapeMismatch(format!(
                    "window of {} frames x {} joints in a batch of {f} x {}",
                    w.frames, w.n_joints, self.topology.n_joints
                )));
            }
            data.extend(w.to_channels_first(self.config.in_dims_per_joint).into_iter().map(T::of));
        }
        Tensor::from_vec(&[windows.len(), c, f], data)
    }

    /// Central-frame 3D pose (`n_p * 3` values, mm) of an odd-length window
    /// of at least `receptive_field` frames, in the current mode.
    pub fn forward(&mut self, window: &GuidedWindow) -> Result<Vec<f64>> {
        let rf = self.receptive_field();
        if window.frames < rf {
            return Err(Error::InputTooShort {
                required: rf,
                actual: window.frames,
            });
        }
        if window.frames % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "window length must be odd to have a central frame, got {}",
                window.frames
            )));
        }
        let x = self.input_tensor(std::slice::from_ref(window))?;
        let y = match self.mode {
            Mode::Eval => self.infer(&x)?,
            Mode::Train => self.forward_tensor(x, 0)?,
        };
        let l_out = window.frames - rf + 1;
        let centre = (l_out - 1) / 2;
        Ok(y.data().chunks_exact(l_out).map(|row| row[centre].as_f64()).collect())
    }

    /// Screen normalization followed by guidance encoding.
    pub fn prepare_input(
        &self,
        seq2d: &PoseSequence,
        mask: &OcclusionMask,
        conf: Option<&ConfidenceTrack>,
    ) -> Result<GuidedWindow> {
        if seq2d.topology.name != self.topology.name {
            return Err(Error::ShapeMismatch(format!(
                "sequence topology {} does not match model topology {}",
                seq2d.topology.name, self.topology.name
            )));
        }
        let screen = normalize_screen(seq2d, self.config.image_width, self.config.image_height)?;
        apply_guidance(&screen, mask, conf)
    }

    /// One root-relative 3D pose per input frame with eval-mode semantics;
    /// windows reaching past either end replicate the edge frame.
    pub fn predict_sequence(
        &self,
        seq2d: &PoseSequence,
        mask: &OcclusionMask,
        conf: Option<&ConfidenceTrack>,
    ) -> Result<PoseSequence> {
        let guided = self.prepare_input(seq2d, mask, conf)?;
        let frames = guided.frames;
        let rf = self.receptive_field();
        let pad = (rf - 1) / 2;
        let n3 = self.topology.n_joints * 3;
        let mut coords = vec![0.0; frames * n3];
        let mut start = 0;
        while start < frames {
            let len = PREDICT_CHUNK.min(frames - start);
            let window = guided.window(start as isize - pad as isize, len + rf - 1);
            let y = self.infer(&self.input_tensor(std::slice::from_ref(&window))?)?;
            for (ch, row) in y.data().chunks_exact(len).enumerate() {
                for (t, v) in row.iter().enumerate() {
                    coords[(start + t) * n3 + ch] = v.as_f64();
                }
            }
            start += len;
        }
        let mut out = PoseSequence::new(self.topology, 3, coords)?;
        out.fps = seq2d.fps;
        out.action = seq2d.action.clone();
        out.subject = seq2d.subject.clone();
        Ok(out)
    }

    /// Named flat arrays in checkpoint order: parameters, then running statistics.
    fn checkpoint_blocks(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .parameters()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.to_f64_vec()))
            .collect();
        for u in self.units() {
            let prefix = u.bn.gamma.name.trim_end_matches(".gamma");
            let c = u.bn.running_mean.len();
            out.push((format!("{prefix}.running_mean"), vec![c], u.bn.running_mean.clone()));
            out.push((format!("{prefix}.running_var"), vec![c], u.bn.running_var.clone()));
        }
        out
    }

    fn restore_block(&mut self, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
        let mismatch = |expected: &[usize]| {
            Error::ShapeMismatch(format!(
                "checkpoint block {name} has shape {shape:?}, config expects {expected:?}"
            ))
        };
        for p in self.parameters_mut() {
            if p.name == name {
                if p.value.shape() != shape {
                    return Err(mismatch(p.value.shape()));
                }
                for (d, &v) in p.value.data_mut().iter_mut().zip(values) {
                    *d = T::of(v);
                }
                return Ok(());
            }
        }
        for u in self.units_mut() {
            let prefix = u.bn.gamma.name.trim_end_matches(".gamma").to_string();
            let target = if name == format!("{prefix}.running_mean") {
                &mut u.bn.running_mean
            } else if name == format!("{prefix}.running_var") {
                &mut u.bn.running_var
            } else {
                continue;
            };
            if shape != [target.len()] {
                return Err(mismatch(&[target.len()]));
            }
            target.copy_from_slice(values);
            return Ok(());
        }
        Err(Error::ShapeMismatch(format!("checkpoint block {name} is not part of the model")))
    }
}

impl<T: Scalar> PosePredictor for LifterModel<T> {
    fn predict(
        &self,
        seq2d: &PoseSequence,
        mask: &OcclusionMask,
        conf: Option<&ConfidenceTrack>,
    ) -> Result<PoseSequence> {
        self.predict_sequence(seq2d, mask, conf)
    }

    fn receptive_field(&self) -> usize {
        receptive_field(&self.config)
    }
}

/// Anything that maps a masked 2D sequence to per-frame root-relative 3D poses.
pub trait PosePredictor: Sync {
    fn predict(
        &self,
        seq2d: &PoseSequence,
        mask: &OcclusionMask,
        conf: Option<&ConfidenceTrack>,
    ) -> Result<PoseSequence>;

    /// Temporal window length the predictor sees per output frame.
    fn receptive_field(&self) -> usize;
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    schema: String,
    config: LifterConfig,
    blocks: Vec<BlockHeader>,
}

/// Writes a JSON header line, then every block as little-endian `f32`.
pub fn save_checkpoint<T: Scalar>(model: &LifterModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let blocks = model.checkpoint_blocks();
    let header = CheckpointHeader {
        schema: CHECKPOINT_SCHEMA.to_string(),
        config: model.config.clone(),
        blocks: blocks
            .iter()
            .map(|(name, shape, _)| BlockHeader {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for (_, _, values) in &blocks {
        for &v in values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::file(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<LifterModel<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line).map_err(|e| Error::file(path, e))?;
    let version_error = |found: String| Error::Version {
        found,
        expected: CHECKPOINT_SCHEMA.to_string(),
    };
    let value: serde_json::Value =
        serde_json::from_slice(&line).map_err(|_| version_error("unreadable header".into()))?;
    match value.get("schema").and_then(|s| s.as_str()) {
        Some(CHECKPOINT_SCHEMA) => {}
        Some(other) => return Err(version_error(other.to_string())),
        None => return Err(version_error("missing schema".into())),
    }
    let header: CheckpointHeader = serde_json::from_value(value)
        .map_err(|e| Error::Parse {
            line: 1,
            message: format!("checkpoint header: {e}"),
        })?;
    let mut model = LifterModel::<T>::build(&header.config, 0)?;
    let expected = model.checkpoint_blocks().len();
    if header.blocks.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint lists {} blocks, config needs {expected}",
            header.blocks.len()
        )));
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(|e| Error::file(path, e))?;
    let total: usize = header.blocks.iter().map(|b| b.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * 4 {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint payload has {} bytes, header describes {}",
            bytes.len(),
            total * 4
        )));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    for block in &header.blocks {
        let n: usize = block.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        model.restore_block(&block.name, &block.shape, &data)?;
    }
    Ok(model)
}

/// Stand-alone header writer used by tests to fabricate foreign files.
#[doc(hidden)]
pub fn write_raw_checkpoint(path: impl AsRef<Path>, header: &str, payload: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(header.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .and_then(|_| f.write_all(payload))
        .map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::occlusion::random_k_mask;
    use crate::tensor::gradcheck::finite_difference_check;

    fn small(blocks: usize, guided: bool) -> LifterConfig {
        LifterConfig {
            channels: 8,
            blocks,
            kernel: 3,
            dilation_base: 2,
            dropout_rate: 0.0,
            output_scale_mm: 1.0,
            ..LifterConfig::full_size("h36m17", guided)
        }
    }

    fn random_seq(frames: usize, seed: u64) -> PoseSequence {
        let topo = get_topology("h36m17").unwrap();
        let mut rng = SplitMix64::new(seed);
        let coords = (0..frames * topo.n_joints * 2).map(|_| rng.uniform_range(100.0, 900.0)).collect();
        PoseSequence::new(topo, 2, coords).unwrap()
    }

    fn random_input(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn recalibration_matches_batch_statistics() {
        let mut rng = SplitMix64::new(12);
        let cfg = LifterConfig {
            dropout_rate: 0.3,
            ..small(2, true)
        };
        let mut model = LifterModel::<f64>::build(&cfg, 4).unwrap();
        let x = random_input(&mut rng, &[3, 68, 40]);
        let before = model.infer(&x).unwrap();
        assert_eq!(model.recalibrate_batch_norm(Vec::new()).unwrap(), 0);
        assert_eq!(model.infer(&x).unwrap(), before);

        let used = model.recalibrate_batch_norm((0..3).map(|_| Ok(x.clone()))).unwrap();
        assert_eq!(used, 3);
        assert_eq!(model.mode(), Mode::Eval);
        let eval = model.infer(&x).unwrap().to_f64_vec();
        let mut probe = model.clone();
        probe.units_mut().into_iter().for_each(|u| u.dropout.rate = 0.0);
        probe.set_mode(Mode::Train);
        let train = probe.forward_tensor(x.clone(), 0).unwrap().to_f64_vec();
        // Only the unbiased/biased variance factor, compounded over layers,
        // separates the two.
        let worst = eval.iter().zip(&train).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = train.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(worst < 0.05 * scale, "{worst} vs {scale}");
        let mut once = model.clone();
        once.recalibrate_batch_norm([Ok(x.clone())]).unwrap();
        let stats = |m: &LifterModel<f64>| -> Vec<f64> {
            m.units().iter().flat_map(|u| u.bn.running_mean.iter().chain(&u.bn.running_var).copied()).collect()
        };
        for (a, b) in stats(&once).iter().zip(stats(&model)) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        assert!(model.units().iter().all(|u| u.dropout.rate == 0.3 && u.bn.momentum == 0.1));
    }

    #[test]
    fn full_size_parameter_counts() {
        let cfg = LifterConfig::full_size("h36m17", true);
        assert_eq!(block_parameter_count(&cfg), 4_200_448);
        assert_eq!(4 * block_parameter_count(&cfg), 16_801_792);
        let hand = 1024 * 1024 * 3 + 1024 + 2 * 1024 + 1024 * 1024 + 1024 + 2 * 1024;
        assert_eq!(block_parameter_count(&cfg), hand);
    }

    #[test]
    fn receptive_field_cases() {
        let mut cfg = LifterConfig::full_size("h36m17", true);
        assert_eq!(receptive_field(&cfg), 243);
        cfg.blocks = 3;
        assert_eq!(receptive_field(&cfg), 81);
        cfg.blocks = 0;
        assert_eq!(receptive_field(&cfg), 3);
    }

    #[test]
    fn enumeration_matches_closed_form() {
        for (blocks, guided) in [(0, true), (1, false), (3, true)] {
            let cfg = small(blocks, guided);
            let model = LifterModel::<f32>::build(&cfg, 1).unwrap();
            assert_eq!(model.enumerated_parameter_count(), parameter_count(&cfg).unwrap());
        }
    }

    #[test]
    fn input_width_guided_vs_baseline() {
        let g = LifterModel::<f32>::build(&small(1, true), 0).unwrap();
        let b = LifterModel::<f32>::build(&small(1, false), 0).unwrap();
        assert_eq!(g.input_channels(), 17 * 4);
        assert_eq!(b.input_channels(), 17 * 2);
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = small(1, true);
        for cfg in [
            LifterConfig { channels: 0, ..base.clone() },
            LifterConfig { kernel: 2, ..base.clone() },
            LifterConfig { in_dims_per_joint: 3, ..base.clone() },
            LifterConfig { topology: "nosuch".into(), ..base.clone() },
        ] {
            assert!(LifterModel::<f32>::build(&cfg, 0).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = small(2, true);
        let a = LifterModel::<f32>::build(&cfg, 9).unwrap();
        let b = LifterModel::<f32>::build(&cfg, 9).unwrap();
        let c = LifterModel::<f32>::build(&cfg, 10).unwrap();
        let vals = |m: &LifterModel<f32>| m.parameters().iter().map(|p| p.value.clone()).collect::<Vec<_>>();
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
    }

    #[test]
    fn forward_shape_and_short_window() {
        let mut cfg = LifterConfig::full_size("h36m17", true);
        cfg.channels = 16;
        let mut model = LifterModel::<f32>::build(&cfg, 3).unwrap();
        let seq = random_seq(243, 1);
        let mask = OcclusionMask::all_present(243, 17);
        let w = model.prepare_input(&seq, &mask, None).unwrap();
        assert_eq!(model.forward(&w).unwrap().len(), 17 * 3);
        let short = w.window(0, 241);
        assert!(matches!(
            model.forward(&short),
            Err(Error::InputTooShort { required: 243, actual: 241 })
        ));
    }

    #[test]
    fn central_prediction_is_local() {
        let cfg = LifterConfig { channels: 8, ..LifterConfig::toy("h36m17", true) };
        let mut model = LifterModel::<f32>::build(&cfg, 5).unwrap();
        let rf = model.receptive_field();
        let f = rf + 40;
        let seq = random_seq(f, 2);
        let mask = random_k_mask(4, f, seq.topology, 5).unwrap();
        let w = model.prepare_input(&seq, &mask, None).unwrap();
        let before = model.forward(&w).unwrap();
        let mut coords = seq.coords().to_vec();
        let stride = seq.stride();
        for frame in (0..20).chain(f - 20..f) {
            for v in &mut coords[frame * stride..(frame + 1) * stride] {
                *v += 37.0;
            }
        }
        let perturbed = seq.with_coords(coords).unwrap();
        let w2 = model.prepare_input(&perturbed, &mask, None).unwrap();
        assert_ne!(w.data(), w2.data());
        assert_eq!(before, model.forward(&w2).unwrap());
    }

    #[test]
    fn predict_sequence_lengths_and_interior_equivalence() {
        let cfg = LifterConfig { channels: 8, blocks: 2, ..LifterConfig::toy("h36m17", true) };
        let mut model = LifterModel::<f32>::build(&cfg, 6).unwrap();
        let seq = random_seq(300, 3);
        let all = OcclusionMask::all_present(300, 17);
        let k0 = random_k_mask(1, 300, seq.topology, 0).unwrap();
        let pred = model.predict_sequence(&seq, &all, None).unwrap();
        assert_eq!(pred.len(), 300);
        assert_eq!(pred.dims, 3);
        assert_eq!(pred, model.predict_sequence(&seq, &k0, None).unwrap());

        let rf = model.receptive_field();
        let half = rf / 2;
        let w = model.prepare_input(&seq, &all, None).unwrap();
        for t in [half, 150, 299 - half] {
            let direct = model.forward(&w.window((t - half) as isize, rf)).unwrap();
            assert_eq!(direct, pred.frame(t), "frame {t}");
        }
    }

    #[test]
    fn information_hiding() {
        let cfg = small(1, true);
        let model = LifterModel::<f32>::build(&cfg, 2).unwrap();
        let seq = random_seq(30, 4);
        let mask = random_k_mask(8, 30, seq.topology, 6).unwrap();
        let mut coords = seq.coords().to_vec();
        for f in 0..30 {
            for j in 0..17 {
                if !mask.is_present(f, j) {
                    coords[(f * 17 + j) * 2] = -5000.0;
                }
            }
        }
        let other = seq.with_coords(coords).unwrap();
        assert_eq!(
            model.predict_sequence(&seq, &mask, None).unwrap(),
            model.predict_sequence(&other, &mask, None).unwrap()
        );
    }

    #[test]
    fn screen_normalization() {
        let topo = get_topology("h36m17").unwrap();
        let mut coords = vec![500.0; 34];
        coords[0] = 1000.0;
        coords[1] = 0.0;
        let seq = PoseSequence::new(topo, 2, coords).unwrap();
        let n = normalize_screen(&seq, 1000.0, 1000.0).unwrap();
        assert_eq!(&n.coords()[..4], &[1.0, -1.0, 0.0, 0.0]);
    }

    /// Full-network gradient check at 64-bit: a random linear functional of
    /// the output, differentiated against inputs and a sample of parameters.
    #[test]
    fn two_block_network_gradients() {
        let cfg = LifterConfig { dropout_rate: 0.2, ..small(2, true) };
        let mut model = LifterModel::<f64>::build(&cfg, 11).unwrap();
        model.set_mode(Mode::Train);
        let rf = model.receptive_field();
        let mut rng = SplitMix64::new(12);
        let x = random_input(&mut rng, &[2, 68, rf + 4]);
        let y = model.forward_tensor(x.clone(), 77).unwrap();
        let r = random_input(&mut rng, y.shape());
        let loss = |y: &Tensor<f64>| y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();
        model.zero_grad();
        model.backward(&r).unwrap();

        let analytic: Vec<Vec<f64>> = model.parameters().iter().map(|p| p.grad.to_f64_vec()).collect();
        let n_params = analytic.len();
        let mut worst: f64 = 0.0;
        for pi in 0..n_params {
            let len = analytic[pi].len();
            let picks = rng.sample_without_replacement(len, len.min(6));
            let base = model.parameters()[pi].value.to_f64_vec();
            let probe: Vec<f64> = picks.iter().map(|&i| base[i]).collect();
            let grads: Vec<f64> = picks.iter().map(|&i| analytic[pi][i]).collect();
            let mut m = model.clone();
            let mut f = |v: &[f64]| {
                let mut vals = base.clone();
                for (&i, &val) in picks.iter().zip(v) {
                    vals[i] = val;
                }
                m.parameters_mut()[pi].value.data_mut().copy_from_slice(&vals);
                loss(&m.forward_tensor(x.clone(), 77).unwrap())
            };
            let name = model.parameters()[pi].name.clone();
            if name.ends_with(".conv.bias") {
                // A per-channel shift before train-mode batch norm cancels
                // exactly, so both gradients must vanish up to rounding.
                assert!(grads.iter().all(|g| g.abs() < 1e-10), "{name}: {grads:?}");
                let h = 1e-3;
                for i in 0..probe.len() {
                    let mut up = probe.clone();
                    let mut down = probe.clone();
                    up[i] += h;
                    down[i] -= h;
                    let numeric = (f(&up) - f(&down)) / (2.0 * h);
                    assert!(numeric.abs() < 1e-8, "{name}: numeric {numeric}");
                }
                continue;
            }
            let err = finite_difference_check(&mut f, &probe, &grads, 1e-4);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "parameter gradient error {worst}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = small(2, true);
        let mut model = LifterModel::<f32>::build(&cfg, 4).unwrap();
        model.set_mode(Mode::Train);
        let mut rng = SplitMix64::new(1);
        let n = 68 * (receptive_field(&cfg) + 6) * 3;
        let x = Tensor::from_vec(&[3, 68, receptive_field(&cfg) + 6], (0..n).map(|_| rng.uniform() as f32).collect()).unwrap();
        model.forward_tensor(x, 1).unwrap();
        model.set_mode(Mode::Eval);
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(model.checkpoint_blocks(), loaded.checkpoint_blocks());
        let seq = random_seq(40, 8);
        let mask = random_k_mask(2, 40, seq.topology, 3).unwrap();
        assert_eq!(
            model.predict_sequence(&seq, &mask, None).unwrap(),
            loaded.predict_sequence(&seq, &mask, None).unwrap()
        );
    }

    #[test]
    fn corrupted_header_is_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        write_raw_checkpoint(&path, "{\"schema\":\"occlift-ckpt/0\"}", &[]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Version { .. })));
        write_raw_checkpoint(&path, "garbage{", &[1, 2, 3]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Version { .. })));
    }
}
