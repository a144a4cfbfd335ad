use super::{Mode, Parameter, Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Values saved by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<f64>,
}

/// Per-channel batch normalization over `N x L`.
///
/// Train mode normalizes with the biased batch variance and updates
/// `running = (1 - momentum) * running + momentum * batch`, where the batch
/// variance used for the running estimate is the unbiased one. Eval mode
/// applies `(x - running_mean) / sqrt(running_var + eps)`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm1d<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut [f64],
    running_var: &mut [f64],
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
    let (n, c, l) = input.dims3("batchnorm1d")?;
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm1d over {c} channels got parameters of length {}/{}/{}/{}",
            gamma.len(),
            beta.len(),
            running_mean.len(),
            running_var.len()
        )));
    }
    let m = n * l;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    match mode {
        Mode::Eval => Ok((batchnorm1d_eval(input, gamma, beta, running_mean, running_var, eps)?, None)),
        Mode::Train => {
            if m < 2 {
                return Err(Error::DegenerateBatch(m));
            }
            let mut x_hat = vec![T::zero(); x.len()];
            let mut inv_std = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * l;
                    sum += x[base..base + l].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / m as f64;
                let mut sq = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * l;
                    sq += x[base..base + l]
                        .iter()
                        .map(|v| (v.as_f64() - mean).powi(2))
                        .sum::<f64>();
                }
                let var = sq / m as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[ch] = inv;
                // Rounded to the element precision so checkpoints restore them exactly.
                running_mean[ch] = T::of((1.0 - momentum) * running_mean[ch] + momentum * mean).as_f64();
                running_var[ch] = T::of((1.0 - momentum) * running_var[ch] + momentum * sq / (m - 1) as f64).as_f64();
                let g = gamma.data()[ch];
                let b = beta.data()[ch];
                let mean_t = T::of(mean);
                let inv_t = T::of(inv);
                for s in 0..n {
                    let base = (s * c + ch) * l;
                    for t in base..base + l {
                        let xh = (x[t] - mean_t) * inv_t;
                        x_hat[t] = xh;
                        out[t] = g * xh + b;
                    }
                }
            }
            Ok((Tensor::from_vec(input.shape(), out)?, Some(BnCache { x_hat, inv_std })))
        }
    }
}

/// Eval-mode normalization with fixed statistics; never mutates state.
pub fn batchnorm1d_eval<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, c, l) = input.dims3("batchnorm1d")?;
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::ShapeMismatch(format!("batchnorm1d over {c} channels got mismatched parameters")));
    }
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        let inv = 1.0 / (running_var[ch] + eps).sqrt();
        let g = gamma.data()[ch].as_f64();
        let scale = T::of(g * inv);
        let shift = T::of(beta.data()[ch].as_f64() - running_mean[ch] * g * inv);
        for s in 0..n {
            let base = (s * c + ch) * l;
            for t in base..base + l {
                out[t] = x[t] * scale + shift;
            }
        }
    }
    Tensor::from_vec(input.shape(), out)
}

/// Train-mode backward: accumulates `d gamma`, `d beta` and returns `dx`,
/// `dx = gamma * inv_std / M * (M * dy - sum(dy) - x_hat * sum(dy * x_hat))`.
pub fn batchnorm1d_backward<T: Scalar>(
    cache: &BnCache<T>,
    shape: &[usize],
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_gamma: &mut Tensor<T>,
    grad_beta: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, l) = match *shape {
        [c, l] => (1, c, l),
        [n, c, l] => (n, c, l),
        _ => return Err(Error::ShapeMismatch(format!("batchnorm1d shape {shape:?}"))),
    };
    if grad_out.len() != n * c * l {
        return Err(Error::ShapeMismatch("batchnorm1d grad_out shape".into()));
    }
    let m = (n * l) as f64;
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); dy.len()];
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xh = 0.0;
        for s in 0..n {
            let base = (s * c + ch) * l;
            for t in base..base + l {
                let g = dy[t].as_f64();
                sum_dy += g;
                sum_dy_xh += g * cache.x_hat[t].as_f64();
            }
        }
        grad_gamma.data_mut()[ch] = grad_gamma.data()[ch] + T::of(sum_dy_xh);
        grad_beta.data_mut()[ch] = grad_beta.data()[ch] + T::of(sum_dy);
        let k = T::of(gamma.data()[ch].as_f64() * cache.inv_std[ch] / m);
        let mean_dy = T::of(sum_dy);
        let mean_dy_xh = T::of(sum_dy_xh);
        let m_t = T::of(m);
        for s in 0..n {
            let base = (s * c + ch) * l;
            for t in base..base + l {
                dx[t] = k * (m_t * dy[t] - mean_dy - cache.x_hat[t] * mean_dy_xh);
            }
        }
    }
    Tensor::from_vec(shape, dx)
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<(BnCache<T>, Vec<usize>)>,
}

impl<T: Scalar> BatchNorm1d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Parameter::new(
                format!("{name}.gamma"),
                Tensor::from_vec(&[channels], vec![T::one(); channels]).expect("shape"),
            ),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (y, cache) = batchnorm1d(
            x,
            &self.gamma.value,
            &self.beta.value,
            &mut self.running_mean,
            &mut self.running_var,
            mode,
            self.momentum,
            self.eps,
        )?;
        self.cache = cache.map(|c| (c, x.shape().to_vec()));
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        batchnorm1d_eval(
            x,
            &self.gamma.value,
            &self.beta.value,
            &self.running_mean,
            &self.running_var,
            self.eps,
        )
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (cache, shape) = self
            .cache
            .take()
            .ok_or_else(|| Error::InvalidConfig("batchnorm backward needs a train-mode forward".into()))?;
        batchnorm1d_backward(
            &cache,
            &shape,
            &self.gamma.value,
            grad_out,
            &mut self.gamma.grad,
            &mut self.beta.grad,
        )
    }
}
