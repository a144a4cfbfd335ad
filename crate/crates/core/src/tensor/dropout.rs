use super::{Mode, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Inverted dropout. In train mode each element survives when a fresh
/// `uniform()` draw from `SplitMix64::new(seed)` is `>= rate` and is scaled
/// by `1 / (1 - rate)`. Returns the output and the per-element multiplier.
pub fn dropout<T: Scalar>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    seed: u64,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::OutOfRange {
            what: "dropout rate",
            value: rate,
            min: 0.0,
            max: 1.0,
        });
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let mut rng = SplitMix64::new(seed);
    let keep = T::of(1.0 / (1.0 - rate));
    let scale: Vec<T> = (0..input.len())
        .map(|_| if rng.uniform() >= rate { keep } else { T::zero() })
        .collect();
    let data = input.data().iter().zip(&scale).map(|(&x, &s)| x * s).collect();
    Ok((Tensor::from_vec(input.shape(), data)?, Some(scale)))
}

#[derive(Debug, Clone)]
pub struct Dropout<T> {
    pub rate: f64,
    scale: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64) -> Self {
        Self { rate, scale: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, seed: u64) -> Result<Tensor<T>> {
        let (y, scale) = dropout(x, self.rate, mode, seed)?;
        self.scale = scale;
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: Tensor<T>) -> Tensor<T> {
        match self.scale.take() {
            None => grad_out,
            Some(scale) => {
                let shape = grad_out.shape().to_vec();
                let data = grad_out.into_data().into_iter().zip(scale).map(|(g, s)| g * s).collect();
                Tensor::from_vec(&shape, data).expect("same shape")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_and_zero_rate_are_identity() {
        let x = Tensor::<f64>::from_f64(&[5], &[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap();
        assert_eq!(dropout(&x, 0.5, Mode::Eval, 1).unwrap().0, x);
        assert_eq!(dropout(&x, 0.0, Mode::Train, 1).unwrap().0, x);
    }

    #[test]
    fn rate_one_rejected() {
        let x = Tensor::<f64>::zeros(&[3]);
        assert!(dropout(&x, 1.0, Mode::Train, 1).is_err());
        assert!(dropout(&x, -0.1, Mode::Train, 1).is_err());
    }

    #[test]
    fn survival_fraction_and_mean() {
        let n = 100_000;
        let mut rng = SplitMix64::new(77);
        let xs: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, 2.0)).collect();
        let x = Tensor::<f64>::from_f64(&[n], &xs).unwrap();
        let (y, _) = dropout(&x, 0.25, Mode::Train, 5).unwrap();
        let survived = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((survived - 0.75).abs() < 0.01, "{survived}");
        let mean_in = xs.iter().sum::<f64>() / n as f64;
        let mean_out = y.data().iter().sum::<f64>() / n as f64;
        assert!((mean_out - mean_in).abs() / mean_in < 0.02);
    }

    #[test]
    fn same_seed_same_mask() {
        let x = Tensor::<f32>::from_vec(&[1000], vec![1.0; 1000]).unwrap();
        let a = dropout(&x, 0.3, Mode::Train, 9).unwrap().0;
        let b = dropout(&x, 0.3, Mode::Train, 9).unwrap().0;
        let c = dropout(&x, 0.3, Mode::Train, 10).unwrap().0;
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
