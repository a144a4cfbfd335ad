//! Shared inputs for the criterion benchmarks.

use occlift_core::{get_topology, PoseSequence, SplitMix64, Tensor};

pub fn random_tensor(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut rng = SplitMix64::new(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect())
        .expect("length matches shape")
}

/// Random on-screen 2D sequence for the 17-joint skeleton.
pub fn random_screen_sequence(seed: u64, frames: usize) -> PoseSequence {
    let topo = get_topology("h36m17").expect("built-in topology");
    let mut rng = SplitMix64::new(seed);
    let coords = (0..frames * topo.n_joints * 2).map(|_| rng.uniform_range(100.0, 900.0)).collect();
    PoseSequence::new(topo, 2, coords).expect("finite coordinates")
}

/// Random 17-joint pose in millimetres, flattened `xyz`.
pub fn random_pose(rng: &mut SplitMix64) -> Vec<f64> {
    (0..51).map(|_| rng.uniform_range(-600.0, 600.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(random_tensor(3, &[2, 4]), random_tensor(3, &[2, 4]));
        assert_eq!(random_screen_sequence(1, 5), random_screen_sequence(1, 5));
        let (mut a, mut b) = (SplitMix64::new(9), SplitMix64::new(9));
        assert_eq!(random_pose(&mut a), random_pose(&mut b));
    }
}
