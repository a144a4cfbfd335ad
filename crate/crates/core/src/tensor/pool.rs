use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Mean over the time axis: `[N, C, L] -> [N, C, 1]`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, l) = input.dims3("global_avg_pool")?;
    let inv = T::of(1.0 / l as f64);
    let data = input
        .data()
        .chunks_exact(l)
        .map(|row| row.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[n, c, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(grad_out: &Tensor<T>, len: usize) -> Result<Tensor<T>> {
    let (n, c, _) = grad_out.dims3("global_avg_pool_backward")?;
    let inv = T::of(1.0 / len as f64);
    let mut out = Vec::with_capacity(n * c * len);
    for &g in grad_out.data() {
        out.extend(std::iter::repeat_n(g * inv, len));
    }
    Tensor::from_vec(&[n, c, len], out)
}

/// Mean softmax cross-entropy of `logits` (`[N, classes]` row-major) against
/// integer labels; returns the loss and `d loss / d logits`.
pub fn softmax_cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if logits.len() != n * classes {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for {n} samples x {classes} classes",
            logits.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += z.ln() + max - row[y];
        for (k, g) in grad[i * classes..(i + 1) * classes].iter_mut().enumerate() {
            let p = (row[k] - max).exp() / z;
            *g = (p - if k == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}
