//! Supervised training of the lifter on chunks of paired sequences.
//!
//! Each epoch cuts every training sequence into chunks of `chunk_outputs`
//! target frames (random offset per sequence and epoch), shuffles the chunks
//! and feeds `batch_size` of them per optimizer step. A chunk's network input
//! is the guided window widened by the receptive field, edge-replicated like
//! [`LifterModel::predict_sequence`]. Targets are root-relative camera-frame
//! poses in millimeters.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::PairedSequence;
use crate::error::{Error, Result};
use crate::lifter::LifterModel;
use crate::metrics::{evaluate, Protocol};
use crate::occlusion::{random_k_mask, GuidedWindow, MaskSpec, OcclusionMask};
use crate::optim::{Adam, AdamConfig};
use crate::rng::SplitMix64;
use crate::tensor::{Mode, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augmentation {
    None,
    /// With probability `p_apply` a chunk gets a RandomK mask, `k ~ U{1..k_max}`.
    RandomKUniform { p_apply: f64, k_max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay_per_epoch: f64,
    /// Chunks per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augmentation: Augmentation,
    /// 32 or 64; must match the model's element type.
    pub precision: u32,
    /// Target frames per chunk.
    pub chunk_outputs: usize,
    /// Batches re-estimating batch-norm statistics after each epoch (0: off).
    pub bn_recalibration_batches: usize,
}

impl TrainConfig {
    /// Adam defaults, decay 0.95 per epoch, masking half of the chunks with
    /// up to `n_joints - 1` missing joints.
    pub fn new(n_joints: usize, epochs: usize, seed: u64) -> Self {
        Self {
            learning_rate: AdamConfig::default().learning_rate,
            lr_decay_per_epoch: 0.95,
            batch_size: 16,
            epochs,
            seed,
            augmentation: Augmentation::RandomKUniform {
                p_apply: 0.5,
                k_max: n_joints.saturating_sub(1),
            },
            precision: 32,
            chunk_outputs: 16,
            bn_recalibration_batches: 64,
        }
    }

    pub fn validate(&self, n_joints: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate > 0.0) || !(self.lr_decay_per_epoch > 0.0) {
            return bad("learning rate and decay must be positive".into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.chunk_outputs == 0 {
            return bad("batch_size, epochs and chunk_outputs must be positive".into());
        }
        if self.precision != 32 && self.precision != 64 {
            return bad(format!("precision must be 32 or 64, got {}", self.precision));
        }
        if let Augmentation::RandomKUniform { p_apply, k_max } = self.augmentation {
            if !(0.0..=1.0).contains(&p_apply) {
                return bad(format!("p_apply must lie in [0, 1], got {p_apply}"));
            }
            if k_max == 0 || k_max >= n_joints {
                return bad(format!("k_max must lie in [1, {}], got {k_max}", n_joints - 1));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss_mm: f64,
    pub val_mpjpe_p1_mm: Option<f64>,
    pub wall_seconds: f64,
}

/// One JSON object per line.
pub fn format_log(logs: &[EpochLog]) -> Result<String> {
    let mut out = String::new();
    for l in logs {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    Ok(out)
}

/// Mean over poses of the mean per-joint Euclidean distance. `pred` and `gt`
/// hold whole poses (`n_joints * 3` values each, joint-major).
pub fn pose_loss(pred: &[f64], gt: &[f64], n_joints: usize) -> Result<f64> {
    pose_loss_grad(pred, gt, n_joints).map(|(l, _)| l)
}

/// Loss and its gradient with respect to `pred`. Coincident joints
/// contribute a zero subgradient.
pub fn pose_loss_grad(pred: &[f64], gt: &[f64], n_joints: usize) -> Result<(f64, Vec<f64>)> {
    let stride = n_joints * 3;
    if pred.len() != gt.len() || stride == 0 || pred.len() % stride != 0 {
        return Err(Error::ShapeMismatch(format!(
            "loss needs equal batches of {stride}-value poses, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(loss_grad_layout(pred, gt, pred.len() / stride, n_joints, 1))
}

/// Same loss on `[batch, n_joints * 3, len]` data (every `(b, t)` is a pose).
fn loss_grad_layout(pred: &[f64], gt: &[f64], batch: usize, n_joints: usize, len: usize) -> (f64, Vec<f64>) {
    let poses = (batch * len) as f64;
    let w = 1.0 / (poses * n_joints as f64);
    let mut grad = vec![0.0; pred.len()];
    let mut total = 0.0;
    for b in 0..batch {
        let base = b * n_joints * 3 * len;
        for j in 0..n_joints {
            for t in 0..len {
                let idx = [0, 1, 2].map(|d| base + (j * 3 + d) * len + t);
                let diff = idx.map(|i| pred[i] - gt[i]);
                let dist = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
                total += dist;
                if dist > 0.0 {
                    for d in 0..3 {
                        grad[idx[d]] = w * diff[d] / dist;
                    }
                }
            }
        }
    }
    (total * w, grad)
}

struct Prepared {
    input: GuidedWindow,
    /// Root-relative targets, frame-major.
    target: Vec<f64>,
    frames: usize,
}

/// Trains `model` in place and returns one log record per epoch. `val`
/// sequences (may be empty) are scored with Protocol 1 on unmasked input
/// after every epoch. `on_epoch` sees each record as soon as it exists.
pub fn fit<T: Scalar>(
    model: &mut LifterModel<T>,
    train: &[PairedSequence],
    val: &[PairedSequence],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let topo = model.topology();
    let n = topo.n_joints;
    config.validate(n)?;
    let bits = 8 * std::mem::size_of::<T>() as u32;
    if bits != config.precision {
        return Err(Error::InvalidConfig(format!(
            "config asks for {}-bit training, model is {bits}-bit",
            config.precision
        )));
    }
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut data = Vec::with_capacity(train.len());
    for p in train.iter() {
        if p.is_empty() {
            return Err(Error::EmptySequence);
        }
        if p.target3d.topology.name != topo.name {
            return Err(Error::ShapeMismatch(format!(
                "sequence {} uses topology {}, model uses {}",
                p.name, p.target3d.topology.name, topo.name
            )));
        }
        let input = model.prepare_input(&p.input2d, &OcclusionMask::all_present(p.len(), n), None)?;
        let target = (0..p.len()).flat_map(|f| p.root_relative_target(f)).collect();
        data.push(Prepared {
            input,
            target,
            frames: p.len(),
        });
    }
    let chunk = data.iter().map(|d| d.frames).min().unwrap_or(1).min(config.chunk_outputs);
    let rf = model.receptive_field();
    let pad = (rf - 1) / 2;
    let n3 = n * 3;

    let mut opt = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    });
    let mut logs = Vec::with_capacity(config.epochs);
    let mut last_loss = f64::NAN;
    for epoch in 1..=config.epochs {
        let clock = Instant::now();
        let epoch_seed = SplitMix64::derive(config.seed, epoch as u64);
        let mut rng = SplitMix64::new(epoch_seed);
        let mut items: Vec<(usize, usize)> = Vec::new();
        for (s, d) in data.iter().enumerate() {
            let offset = rng.below(d.frames % chunk + 1);
            items.extend((0..(d.frames - offset) / chunk).map(|i| (s, offset + i * chunk)));
        }
        rng.shuffle(&mut items);

        let batches: Vec<&[(usize, usize)]> = items.chunks(config.batch_size).collect();
        let make_batch = |model: &LifterModel<T>, step: usize| -> Result<(Tensor<T>, Vec<f64>)> {
            let batch = batches[step];
            let windows = batch
                .iter()
                .enumerate()
                .map(|(i, &(s, start))| {
                    let mut w = data[s].input.window(start as isize - pad as isize, chunk + rf - 1);
                    let item_seed = SplitMix64::derive(epoch_seed, (step * config.batch_size + i) as u64 + 1);
                    augment(&mut w, config.augmentation, item_seed, topo)?;
                    Ok(w)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut gt = vec![0.0; batch.len() * n3 * chunk];
            for (b, &(s, start)) in batch.iter().enumerate() {
                for t in 0..chunk {
                    let frame = &data[s].target[(start + t) * n3..(start + t + 1) * n3];
                    for (c, &v) in frame.iter().enumerate() {
                        gt[(b * n3 + c) * chunk + t] = v;
                    }
                }
            }
            Ok((model.input_tensor(&windows)?, gt))
        };

        model.set_mode(Mode::Train);
        let lr = opt.lr;
        let (mut loss_sum, mut loss_weight) = (0.0, 0.0);
        for (step, batch) in batches.iter().enumerate() {
            let (x, gt) = make_batch(model, step)?;
            let step_seed = SplitMix64::derive(epoch_seed, u64::MAX - step as u64);
            let y = model.forward_tensor(x, step_seed)?;
            let (loss, grad) = loss_grad_layout(&y.to_f64_vec(), &gt, batch.len(), n, chunk);
            if !loss.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    step,
                    last_loss,
                });
            }
            last_loss = loss;
            model.zero_grad();
            model.backward(&Tensor::from_f64(y.shape(), &grad)?)?;
            opt.step(&mut model.parameters_mut());
            loss_sum += loss * batch.len() as f64;
            loss_weight += batch.len() as f64;
        }
        // Running averages lag behind weights that moved during the epoch.
        let recal: Vec<Result<Tensor<T>>> = (0..batches.len().min(config.bn_recalibration_batches))
            .map(|step| make_batch(model, step).map(|(x, _)| x))
            .collect();
        model.recalibrate_batch_norm(recal)?;
        model.set_mode(Mode::Eval);
        let val_mpjpe_p1_mm = if val.is_empty() {
            None
        } else {
            let report = evaluate(&*model, val, Protocol::RootAligned, &MaskSpec::None, epoch_seed)?;
            Some(report.overall_mm)
        };
        opt.decay(config.lr_decay_per_epoch);
        let log = EpochLog {
            epoch,
            lr,
            train_loss_mm: loss_sum / loss_weight.max(1.0),
            val_mpjpe_p1_mm,
            wall_seconds: clock.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

fn augment(
    window: &mut GuidedWindow,
    augmentation: Augmentation,
    seed: u64,
    topology: &crate::skeleton::SkeletonTopology,
) -> Result<()> {
    let Augmentation::RandomKUniform { p_apply, k_max } = augmentation else {
        return Ok(());
    };
    let mut rng = SplitMix64::new(seed);
    if rng.uniform() >= p_apply {
        return Ok(());
    }
    let k = 1 + rng.below(k_max);
    let mask = random_k_mask(rng.next_u64(), window.frames, topology, k)?;
    window.occlude(&mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifter::LifterConfig;
    use crate::skeleton::get_topology;
    use crate::synth::make_dataset;

    #[test]
    fn loss_examples() {
        let gt: Vec<f64> = (0..51).map(|i| i as f64 * 3.1).collect();
        assert_eq!(pose_loss(&gt, &gt, 17).unwrap(), 0.0);
        let shifted: Vec<f64> = gt.iter().enumerate().map(|(i, v)| if i % 3 == 0 { v + 3.0 } else { *v }).collect();
        assert!((pose_loss(&shifted, &gt, 17).unwrap() - 3.0).abs() < 1e-12);
        assert!(matches!(pose_loss(&[], &[], 17), Err(Error::EmptyBatch)));
        assert!(pose_loss(&gt[..48], &gt[..48], 17).is_err());
    }

    #[test]
    fn loss_matches_brute_force() {
        let mut rng = SplitMix64::new(71);
        let (poses, n) = (9, 17);
        let pred: Vec<f64> = (0..poses * n * 3).map(|_| rng.normal() * 300.0).collect();
        let gt: Vec<f64> = (0..poses * n * 3).map(|_| rng.normal() * 300.0).collect();
        let mut per_pose = Vec::new();
        for p in 0..poses {
            let mut s = 0.0;
            for j in 0..n {
                let mut sq = 0.0;
                for d in 0..3 {
                    let i = p * n * 3 + j * 3 + d;
                    sq += (pred[i] - gt[i]) * (pred[i] - gt[i]);
                }
                s += sq.sqrt();
            }
            per_pose.push(s / n as f64);
        }
        let oracle = per_pose.iter().sum::<f64>() / poses as f64;
        assert!((pose_loss(&pred, &gt, n).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(5);
        let pred: Vec<f64> = (0..2 * 17 * 3).map(|_| rng.normal()).collect();
        let gt: Vec<f64> = (0..2 * 17 * 3).map(|_| rng.normal()).collect();
        let (_, grad) = pose_loss_grad(&pred, &gt, 17).unwrap();
        let h = 1e-6;
        for i in [0, 7, 50, 101] {
            let mut p = pred.clone();
            p[i] += h;
            let up = pose_loss(&p, &gt, 17).unwrap();
            p[i] -= 2.0 * h;
            let down = pose_loss(&p, &gt, 17).unwrap();
            let numeric = (up - down) / (2.0 * h);
            assert!((numeric - grad[i]).abs() < 1e-8 * grad[i].abs().max(1.0), "{i}");
        }
    }

    #[test]
    fn layout_loss_agrees_with_pose_loss() {
        let mut rng = SplitMix64::new(9);
        let (b, n, l) = (2, 17, 5);
        let pred: Vec<f64> = (0..b * n * 3 * l).map(|_| rng.normal()).collect();
        let gt: Vec<f64> = (0..b * n * 3 * l).map(|_| rng.normal()).collect();
        let to_poses = |v: &[f64]| -> Vec<f64> {
            let mut out = Vec::new();
            for bi in 0..b {
                for t in 0..l {
                    for c in 0..n * 3 {
                        out.push(v[(bi * n * 3 + c) * l + t]);
                    }
                }
            }
            out
        };
        let (a, _) = loss_grad_layout(&pred, &gt, b, n, l);
        let direct = pose_loss(&to_poses(&pred), &to_poses(&gt), n).unwrap();
        assert!((a - direct).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let c = TrainConfig::new(17, 2, 0);
        c.validate(17).unwrap();
        let bad_k = TrainConfig {
            augmentation: Augmentation::RandomKUniform { p_apply: 0.5, k_max: 17 },
            ..c.clone()
        };
        assert!(bad_k.validate(17).is_err());
        assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate(17).is_err());
        assert!(TrainConfig { precision: 16, ..c }.validate(17).is_err());
    }

    fn tiny() -> LifterConfig {
        LifterConfig {
            channels: 32,
            blocks: 1,
            dropout_rate: 0.1,
            ..LifterConfig::toy("h36m17", true)
        }
    }

    fn small_data() -> Vec<PairedSequence> {
        let ds = make_dataset(3, get_topology("h36m17").unwrap(), 2, 10, 48).unwrap();
        ds.train.into_iter().chain(ds.test).take(10).collect()
    }

    fn quick(seed: u64) -> TrainConfig {
        TrainConfig {
            chunk_outputs: 16,
            learning_rate: 3e-3,
            ..TrainConfig::new(17, 2, seed)
        }
    }

    #[test]
    fn loss_decreases_over_two_epochs() {
        let data = small_data();
        let mut model = LifterModel::<f32>::build(&tiny(), 1).unwrap();
        let logs = fit(&mut model, &data, &data[..2], &quick(4), |_| {}).unwrap();
        assert_eq!(logs.len(), 2);
        assert!(logs[1].train_loss_mm < logs[0].train_loss_mm, "{logs:?}");
        assert!(logs[0].val_mpjpe_p1_mm.unwrap() > 0.0);
        assert!((logs[1].lr - logs[0].lr * 0.95).abs() < 1e-15);
        assert_eq!(model.mode(), Mode::Eval);
    }

    #[test]
    fn training_is_deterministic() {
        let data = small_data();
        let run = || {
            let mut model = LifterModel::<f32>::build(&tiny(), 1).unwrap();
            let logs = fit(&mut model, &data, &[], &quick(8), |_| {}).unwrap();
            let params: Vec<Vec<f32>> = model.parameters().iter().map(|p| p.value.data().to_vec()).collect();
            (params, logs.iter().map(|l| l.train_loss_mm).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn precision_must_match_model() {
        let data = small_data();
        let mut model = LifterModel::<f32>::build(&tiny(), 1).unwrap();
        let config = TrainConfig { precision: 64, ..quick(1) };
        assert!(matches!(fit(&mut model, &data, &[], &config, |_| {}), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn diverging_training_aborts() {
        let data = small_data();
        let mut model = LifterModel::<f32>::build(&tiny(), 1).unwrap();
        for p in model.parameters_mut() {
            p.value.fill(f32::NAN);
        }
        let err = fit(&mut model, &data, &[], &quick(1), |_| {}).unwrap_err();
        assert!(matches!(err, Error::NanLoss { epoch: 1, step: 0, .. }), "{err}");
    }

    #[test]
    fn log_lines() {
        let logs = vec![EpochLog {
            epoch: 1,
            lr: 1e-3,
            train_loss_mm: 80.5,
            val_mpjpe_p1_mm: None,
            wall_seconds: 0.25,
        }];
        let text = format_log(&logs).unwrap();
        assert_eq!(text.lines().count(), 1);
        let back: EpochLog = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(back, logs[0]);
    }
}
