//! Synthetic skeleton motion with exact ground truth.
//!
//! Joint angles are sums of sinusoids around a class-specific base posture.
//! Forward kinematics: the bone from parent `p` to joint `j` is
//! `G_p * (scale * length_j * rest_direction_j)` where `G_j = G_p * R_j` and
//! `R_j = Rz(c) Ry(b) Rx(a)` of the joint's three angles. The root's global
//! rotation is `Ry(yaw) * R_root`. World frame: y up, subject facing -z.
//!
//! The default camera sits 5 m from the subject with a 1000 px focal length,
//! principal point (500, 500) and camera axes x right, y down, z forward
//! (rotation `diag(1, -1, -1)`).

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PairedSequence};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::skeleton::{PoseSequence, SkeletonTopology};

/// Per-axis bound on `|base| + sum |amplitude|` of every joint angle (rad).
pub const MAX_JOINT_ANGLE: f64 = 1.2;
pub const DEFAULT_FPS: f64 = 50.0;
/// Subjects cycle through `0..SUBJECTS`; even ids train, odd ids test.
pub const SUBJECTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub amplitude: [f64; 3],
    pub frequency_hz: f64,
    pub phase: [f64; 3],
}

impl Harmonic {
    fn eval(&self, t: f64) -> [f64; 3] {
        let w = TAU * self.frequency_hz * t;
        [0, 1, 2].map(|d| self.amplitude[d] * (w + self.phase[d]).sin())
    }
}

fn sum_harmonics(hs: &[Harmonic], t: f64) -> [f64; 3] {
    hs.iter().fold([0.0; 3], |acc, h| {
        let v = h.eval(t);
        [acc[0] + v[0], acc[1] + v[1], acc[2] + v[2]]
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub action_id: String,
    /// Base joint angles (rad), one triple per joint.
    pub base: Vec<[f64; 3]>,
    /// Angle oscillations (rad), one list per joint.
    pub joints: Vec<Vec<Harmonic>>,
    /// Root translation oscillation (mm).
    pub root: Vec<Harmonic>,
    /// Heading oscillation about the vertical axis (rad, first component used).
    pub yaw: Vec<Harmonic>,
}

impl ActionSpec {
    /// Every joint at its rest direction, no motion.
    pub fn still(action_id: impl Into<String>, topology: &SkeletonTopology) -> Self {
        Self {
            action_id: action_id.into(),
            base: vec![[0.0; 3]; topology.n_joints],
            joints: vec![Vec::new(); topology.n_joints],
            root: Vec::new(),
            yaw: Vec::new(),
        }
    }

    /// Class template: a base posture and 3-5 harmonics per articulated
    /// joint in a frequency band that rises with `class`.
    pub fn class_template(seed: u64, topology: &SkeletonTopology, class: usize) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut spec = Self::still(format!("a{class:02}"), topology);
        let band = 0.3 + 0.25 * class as f64;
        for j in 0..topology.n_joints {
            if topology.children(j).next().is_none() {
                continue;
            }
            let lean = if j == topology.root { 0.15 } else { 0.6 };
            let base = [0, 1, 2].map(|_| rng.uniform_range(-lean, lean));
            let n = 3 + rng.below(3);
            let budget = [0, 1, 2].map(|d| MAX_JOINT_ANGLE - base[d].abs());
            let mut hs: Vec<Harmonic> = (0..n)
                .map(|_| Harmonic {
                    amplitude: [0, 1, 2].map(|_| rng.uniform_range(0.0, 0.35)),
                    frequency_hz: rng.uniform_range(band, band + 0.35),
                    phase: [0, 1, 2].map(|_| rng.uniform_range(0.0, TAU)),
                })
                .collect();
            for d in 0..3 {
                let total: f64 = hs.iter().map(|h| h.amplitude[d]).sum();
                let cap = budget[d] * 0.9;
                if total > cap {
                    hs.iter_mut().for_each(|h| h.amplitude[d] *= cap / total);
                }
            }
            spec.base[j] = base;
            spec.joints[j] = hs;
        }
        spec.root = (0..2)
            .map(|_| Harmonic {
                amplitude: [rng.uniform_range(0.0, 200.0), rng.uniform_range(0.0, 40.0), rng.uniform_range(0.0, 200.0)],
                frequency_hz: rng.uniform_range(0.05, 0.25),
                phase: [0, 1, 2].map(|_| rng.uniform_range(0.0, TAU)),
            })
            .collect();
        spec.yaw = vec![Harmonic {
            amplitude: [rng.uniform_range(0.0, 0.5), 0.0, 0.0],
            frequency_hz: rng.uniform_range(0.05, 0.2),
            phase: [rng.uniform_range(0.0, TAU), 0.0, 0.0],
        }];
        spec
    }

    /// Per-sequence variation of a template: amplitudes x U(0.8, 1.2),
    /// frequencies x U(0.9, 1.1), phases + U(-0.5, 0.5), base + U(-0.05, 0.05).
    /// Stays within [`MAX_JOINT_ANGLE`].
    pub fn realize(&self, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut out = self.clone();
        for (base, hs) in out.base.iter_mut().zip(&mut out.joints) {
            if hs.is_empty() {
                continue;
            }
            for b in base.iter_mut() {
                *b += rng.uniform_range(-0.05, 0.05);
            }
            for h in hs.iter_mut() {
                for d in 0..3 {
                    h.amplitude[d] *= rng.uniform_range(0.8, 1.2);
                    h.phase[d] += rng.uniform_range(-0.5, 0.5);
                }
                h.frequency_hz *= rng.uniform_range(0.9, 1.1);
            }
            for d in 0..3 {
                let total: f64 = hs.iter().map(|h| h.amplitude[d]).sum();
                let cap = (MAX_JOINT_ANGLE - base[d].abs()).max(0.0);
                if total > cap {
                    hs.iter_mut().for_each(|h| h.amplitude[d] *= cap / total);
                }
            }
        }
        out
    }

    pub fn validate(&self, topology: &SkeletonTopology) -> Result<()> {
        if self.base.len() != topology.n_joints || self.joints.len() != topology.n_joints {
            return Err(Error::ShapeMismatch(format!(
                "action {} describes {} joints, topology {} has {}",
                self.action_id,
                self.base.len(),
                topology.name,
                topology.n_joints
            )));
        }
        for (j, (base, hs)) in self.base.iter().zip(&self.joints).enumerate() {
            for d in 0..3 {
                let total = base[d].abs() + hs.iter().map(|h| h.amplitude[d].abs()).sum::<f64>();
                if total > MAX_JOINT_ANGLE + 1e-12 {
                    return Err(Error::OutOfRange {
                        what: "joint angle bound",
                        value: total,
                        min: 0.0,
                        max: MAX_JOINT_ANGLE,
                    });
                }
                if !total.is_finite() {
                    return Err(Error::NonFinite { frame: 0, joint: j });
                }
            }
        }
        Ok(())
    }
}

/// Per-subject body and placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Performer {
    pub bone_scale: f64,
    /// Heading offset about the vertical axis (rad).
    pub heading: f64,
}

impl Default for Performer {
    fn default() -> Self {
        Self {
            bone_scale: 1.0,
            heading: 0.0,
        }
    }
}

impl Performer {
    /// Bone scale U(0.9, 1.1), heading U(-pi/3, pi/3).
    pub fn random(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        Self {
            bone_scale: rng.uniform_range(0.9, 1.1),
            heading: rng.uniform_range(-PI / 3.0, PI / 3.0),
        }
    }
}

fn rotation(a: [f64; 3]) -> Matrix3<f64> {
    *Rotation3::from_euler_angles(a[0], a[1], a[2]).matrix()
}

/// World-frame motion with the default performer; `seed` picks the start
/// time within the motion (uniform in `[0, 10)` s).
pub fn generate(
    seed: u64,
    topology: &'static SkeletonTopology,
    action: &ActionSpec,
    frames: usize,
    fps: f64,
) -> Result<PoseSequence> {
    generate_for(seed, topology, action, &Performer::default(), frames, fps)
}

pub fn generate_for(
    seed: u64,
    topology: &'static SkeletonTopology,
    action: &ActionSpec,
    performer: &Performer,
    frames: usize,
    fps: f64,
) -> Result<PoseSequence> {
    let lengths = topology
        .bone_lengths_mm
        .as_ref()
        .ok_or_else(|| Error::MissingBoneLengths(topology.name.to_string()))?;
    action.validate(topology)?;
    if frames == 0 {
        return Err(Error::EmptySequence);
    }
    if !(fps > 0.0) {
        return Err(Error::InvalidConfig(format!("fps must be positive, got {fps}")));
    }
    let order = topology.topological_order();
    let t0 = SplitMix64::new(seed).uniform_range(0.0, 10.0);
    let root_height = pelvis_height(topology, lengths) * performer.bone_scale;
    let n = topology.n_joints;
    let mut coords = Vec::with_capacity(frames * n * 3);
    let mut global = vec![Matrix3::identity(); n];
    let mut pos = vec![Vector3::zeros(); n];
    for f in 0..frames {
        let t = t0 + f as f64 / fps;
        for &j in &order {
            let osc = sum_harmonics(&action.joints[j], t);
            let local = rotation([0, 1, 2].map(|d| action.base[j][d] + osc[d]));
            if j == topology.root {
                let yaw = performer.heading + sum_harmonics(&action.yaw, t)[0];
                global[j] = rotation([0.0, yaw, 0.0]) * local;
                let r = sum_harmonics(&action.root, t);
                pos[j] = Vector3::new(r[0], root_height + r[1], r[2]);
            } else {
                let p = topology.parent[j];
                let d = topology.rest_directions[j];
                let bone = Vector3::new(d[0], d[1], d[2]) * (lengths[j] * performer.bone_scale);
                pos[j] = pos[p] + global[p] * bone;
                global[j] = global[p] * local;
            }
        }
        for p in &pos {
            coords.extend_from_slice(&[p.x, p.y, p.z]);
        }
    }
    Ok(PoseSequence::new(topology, 3, coords)?
        .with_fps(fps)
        .with_action(action.action_id.clone()))
}

/// Length of the longest downward chain from the root (the legs).
fn pelvis_height(topology: &SkeletonTopology, lengths: &[f64]) -> f64 {
    let mut depth = vec![0.0; topology.n_joints];
    let mut best: f64 = 0.0;
    for j in topology.topological_order() {
        if j == topology.root {
            continue;
        }
        let drop = -topology.rest_directions[j][1] * lengths[j];
        depth[j] = depth[topology.parent[j]] + drop;
        best = best.max(depth[j]);
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: [f64; 2],
    pub principal: [f64; 2],
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// World-to-camera translation (mm): `X_c = R X_w + t`.
    pub translation: [f64; 3],
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            focal: [1000.0, 1000.0],
            principal: [500.0, 500.0],
            rotation: [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
            translation: [0.0, 900.0, 5000.0],
        }
    }
}

impl Camera {
    /// Identity pose with the given intrinsics.
    pub fn pinhole(focal: f64, principal: [f64; 2]) -> Self {
        Self {
            focal: [focal, focal],
            principal,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    fn rot(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    /// World-frame 3D sequence to the camera frame.
    pub fn to_camera(&self, seq3d: &PoseSequence) -> Result<PoseSequence> {
        let r = self.rot();
        let t = Vector3::from(self.translation);
        let coords = seq3d
            .coords()
            .chunks_exact(3)
            .flat_map(|p| {
                let q = r * Vector3::new(p[0], p[1], p[2]) + t;
                [q.x, q.y, q.z]
            })
            .collect();
        seq3d.with_coords(coords)
    }
}

/// Pinhole projection `u = fx X / Z + cx`, `v = fy Y / Z + cy` of the
/// world-frame sequence after the camera's rigid transform.
pub fn project(camera: &Camera, seq3d: &PoseSequence) -> Result<PoseSequence> {
    if camera.focal.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::InvalidConfig("camera focal length must be positive".into()));
    }
    let cam = camera.to_camera(seq3d)?;
    let n = cam.n_joints();
    let mut coords = Vec::with_capacity(cam.len() * n * 2);
    for f in 0..cam.len() {
        for j in 0..n {
            let p = cam.joint(f, j);
            if !(p[2] > 0.0) {
                return Err(Error::NonPositiveDepth {
                    frame: f,
                    joint: j,
                    depth: p[2],
                });
            }
            coords.push(camera.focal[0] * p[0] / p[2] + camera.principal[0]);
            coords.push(camera.focal[1] * p[1] / p[2] + camera.principal[1]);
        }
    }
    let mut out = PoseSequence::new(seq3d.topology, 2, coords)?;
    out.fps = seq3d.fps;
    out.action = seq3d.action.clone();
    out.subject = seq3d.subject.clone();
    Ok(out)
}

/// Labelled paired dataset. Sequence `g = action * per_action + s` belongs to
/// subject `g % 10`; even subjects form the training split. 3D targets are in
/// the default camera's frame.
pub fn make_dataset(
    seed: u64,
    topology: &'static SkeletonTopology,
    n_actions: usize,
    per_action: usize,
    frames: usize,
) -> Result<Dataset> {
    if n_actions < 2 {
        return Err(Error::OutOfRange {
            what: "n_actions",
            value: n_actions as f64,
            min: 2.0,
            max: f64::INFINITY,
        });
    }
    let camera = Camera::default();
    let actions: Vec<String> = (0..n_actions).map(|a| format!("a{a:02}")).collect();
    let mut ds = Dataset {
        topology: topology.name.to_string(),
        actions: actions.clone(),
        source: serde_json::json!({
            "generator": "synth",
            "seed": seed,
            "actions": n_actions,
            "per_action": per_action,
            "frames": frames,
            "fps": DEFAULT_FPS,
            "camera": camera,
        }),
        train: Vec::new(),
        test: Vec::new(),
    };
    for (a, action) in actions.iter().enumerate() {
        let template = ActionSpec::class_template(SplitMix64::derive(seed, a as u64), topology, a);
        for s in 0..per_action {
            let g = (a * per_action + s) as u64;
            let subject = (g as usize) % SUBJECTS;
            let performer = Performer::random(SplitMix64::derive(seed, 10_000 + subject as u64));
            let spec = template.realize(SplitMix64::derive(seed, 20_000 + g));
            let world = generate_for(SplitMix64::derive(seed, 30_000 + g), topology, &spec, &performer, frames, DEFAULT_FPS)?;
            let world = world.with_subject(format!("S{subject}"));
            let seq3d = camera.to_camera(&world)?;
            let seq2d = project(&camera, &world)?;
            let pair = PairedSequence::new(format!("{action}_{s:03}"), action.clone(), a, subject, seq2d, seq3d)?;
            if subject % 2 == 0 {
                ds.train.push(pair);
            } else {
                ds.test.push(pair);
            }
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::get_topology;

    fn h36m() -> &'static SkeletonTopology {
        get_topology("h36m17").unwrap()
    }

    fn bone_lengths(seq: &PoseSequence) -> Vec<Vec<f64>> {
        let topo = seq.topology;
        (0..seq.len())
            .map(|f| {
                (0..topo.n_joints)
                    .filter(|&j| j != topo.root)
                    .map(|j| {
                        let (a, b) = (seq.joint(f, j), seq.joint(f, topo.parent[j]));
                        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn bone_lengths_constant() {
        for name in ["h36m17", "sysu20", "ntu25"] {
            let topo = get_topology(name).unwrap();
            let spec = ActionSpec::class_template(5, topo, 3).realize(6);
            let seq = generate_for(7, topo, &spec, &Performer::random(8), 120, 50.0).unwrap();
            let lens = bone_lengths(&seq);
            for frame in &lens {
                for (a, b) in frame.iter().zip(&lens[0]) {
                    assert!((a - b).abs() < 1e-9, "{name}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ActionSpec::class_template(1, h36m(), 0);
        let a = generate(2, h36m(), &spec, 50, 50.0).unwrap();
        assert_eq!(a, generate(2, h36m(), &spec, 50, 50.0).unwrap());
        assert_ne!(a, generate(3, h36m(), &spec, 50, 50.0).unwrap());
    }

    #[test]
    fn still_action_is_static() {
        let seq = generate(4, h36m(), &ActionSpec::still("idle", h36m()), 10, 50.0).unwrap();
        for f in 1..10 {
            assert_eq!(seq.frame(f), seq.frame(0));
        }
        // Rest pose: left wrist hangs below the left shoulder by arm length.
        let (s, w) = (seq.joint(0, 11), seq.joint(0, 13));
        assert!((s[1] - w[1] - (278.0 + 252.0)).abs() < 1e-9);
    }

    #[test]
    fn missing_bone_lengths() {
        let mut topo = h36m().clone();
        topo.bone_lengths_mm = None;
        let topo: &'static SkeletonTopology = Box::leak(Box::new(topo));
        let spec = ActionSpec::still("x", topo);
        assert!(matches!(generate(0, topo, &spec, 5, 50.0), Err(Error::MissingBoneLengths(_))));
    }

    #[test]
    fn templates_respect_angle_bound() {
        for c in 0..8 {
            let t = ActionSpec::class_template(c, h36m(), c as usize);
            t.validate(h36m()).unwrap();
            t.realize(99).validate(h36m()).unwrap();
        }
    }

    fn one_point(p: [f64; 3]) -> PoseSequence {
        let mut coords = vec![0.0, 0.0, 1000.0].repeat(17);
        coords[..3].copy_from_slice(&p);
        PoseSequence::new(h36m(), 3, coords).unwrap()
    }

    #[test]
    fn projection_cases() {
        let cam = Camera::pinhole(1000.0, [0.0, 0.0]);
        let on_axis = project(&cam, &one_point([0.0, 0.0, 1000.0])).unwrap();
        assert_eq!(on_axis.joint(0, 0), &[0.0, 0.0]);
        let off = project(&cam, &one_point([100.0, 0.0, 1000.0])).unwrap();
        assert_eq!(off.joint(0, 0), &[100.0, 0.0]);
        let cam = Camera::pinhole(1000.0, [500.0, 400.0]);
        let near = project(&cam, &one_point([120.0, -80.0, 1500.0])).unwrap();
        let far = project(&cam, &one_point([120.0, -80.0, 3000.0])).unwrap();
        for d in 0..2 {
            let c = cam.principal[d];
            assert!(((near.joint(0, 0)[d] - c) - 2.0 * (far.joint(0, 0)[d] - c)).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_rejects_points_behind() {
        let cam = Camera::pinhole(1000.0, [0.0, 0.0]);
        let err = project(&cam, &one_point([0.0, 0.0, -5.0])).unwrap_err();
        assert!(matches!(err, Error::NonPositiveDepth { frame: 0, joint: 0, .. }));
    }

    #[test]
    fn dataset_counts_split_and_frustum() {
        let ds = make_dataset(11, h36m(), 8, 5, 40).unwrap();
        assert_eq!(ds.len(), 40);
        let train: std::collections::BTreeSet<usize> = ds.train.iter().map(|p| p.subject).collect();
        let test: std::collections::BTreeSet<usize> = ds.test.iter().map(|p| p.subject).collect();
        assert!(train.is_disjoint(&test));
        for p in ds.train.iter().chain(&ds.test) {
            assert!(p.input2d.coords().iter().all(|&v| (0.0..=1000.0).contains(&v)));
            assert!(p.target3d.coords().chunks_exact(3).all(|q| q[2] > 1000.0));
        }
        assert!(make_dataset(11, h36m(), 1, 5, 40).is_err());
        assert_eq!(ds, make_dataset(11, h36m(), 8, 5, 40).unwrap());
    }

    #[test]
    fn camera_frame_matches_projection() {
        let ds = make_dataset(3, h36m(), 2, 1, 5).unwrap();
        let p = &ds.train[0];
        let cam = Camera::default();
        for f in 0..5 {
            for j in 0..17 {
                let q = p.target3d.joint(f, j);
                let uv = p.input2d.joint(f, j);
                assert!((cam.focal[0] * q[0] / q[2] + cam.principal[0] - uv[0]).abs() < 1e-9);
                assert!((cam.focal[1] * q[1] / q[2] + cam.principal[1] - uv[1]).abs() < 1e-9);
            }
        }
    }
}
