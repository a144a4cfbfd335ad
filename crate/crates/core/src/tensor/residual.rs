use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn crop_offset<T: Scalar>(main: &Tensor<T>, skip: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, c, lm) = main.dims3("residual_add")?;
    let (ns, cs, ls) = skip.dims3("residual_add")?;
    if n != ns || c != cs {
        return Err(Error::ShapeMismatch(format!(
            "residual_add main {:?} vs skip {:?}",
            main.shape(),
            skip.shape()
        )));
    }
    if ls < lm || (ls - lm) % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "residual skip length {ls} cannot be center-cropped to {lm}"
        )));
    }
    Ok((n, c, lm, ls, (ls - lm) / 2))
}

/// `main + center_crop(skip)` along the time axis.
pub fn residual_add<T: Scalar>(main: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, lm, ls, off) = crop_offset(main, skip)?;
    let mut out = main.data().to_vec();
    for row in 0..n * c {
        let src = &skip.data()[row * ls + off..row * ls + off + lm];
        for (o, &s) in out[row * lm..(row + 1) * lm].iter_mut().zip(src) {
            *o = *o + s;
        }
    }
    Tensor::from_vec(main.shape(), out)
}

/// Gradient for the skip input: `grad_out` zero-padded back to `skip_len`.
/// The gradient for `main` is `grad_out` itself.
pub fn residual_add_backward<T: Scalar>(grad_out: &Tensor<T>, skip_len: usize) -> Result<Tensor<T>> {
    let (n, c, lm) = grad_out.dims3("residual_add_backward")?;
    if skip_len < lm || (skip_len - lm) % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "residual skip length {skip_len} incompatible with {lm}"
        )));
    }
    let off = (skip_len - lm) / 2;
    let mut out = vec![T::zero(); n * c * skip_len];
    for row in 0..n * c {
        out[row * skip_len + off..row * skip_len + off + lm]
            .copy_from_slice(&grad_out.data()[row * lm..(row + 1) * lm]);
    }
    let shape: Vec<usize> = if grad_out.shape().len() == 2 {
        vec![c, skip_len]
    } else {
        vec![n, c, skip_len]
    };
    Tensor::from_vec(&shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn equal_lengths_is_plain_sum() {
        let a = Tensor::<f64>::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[1, 3], &[10.0, 20.0, 30.0]).unwrap();
        assert_eq!(residual_add(&a, &b).unwrap().data(), &[11.0, 22.0, 33.0]);
    }

    #[test]
    fn zero_main_returns_center_slice() {
        let main = Tensor::<f64>::zeros(&[2, 3]);
        let skip = Tensor::<f64>::from_f64(&[2, 7], &(0..14).map(|v| v as f64).collect::<Vec<_>>()).unwrap();
        let y = residual_add(&main, &skip).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0, 4.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn random_case_matches_crop_then_add() {
        let mut rng = SplitMix64::new(4);
        let (n, c, lm, ls) = (2, 3, 5, 11);
        let m: Vec<f64> = (0..n * c * lm).map(|_| rng.normal()).collect();
        let s: Vec<f64> = (0..n * c * ls).map(|_| rng.normal()).collect();
        let y = residual_add(
            &Tensor::<f64>::from_f64(&[n, c, lm], &m).unwrap(),
            &Tensor::from_f64(&[n, c, ls], &s).unwrap(),
        )
        .unwrap();
        for i in 0..n * c {
            for t in 0..lm {
                assert_eq!(y.data()[i * lm + t], m[i * lm + t] + s[i * ls + 3 + t]);
            }
        }
        let g = residual_add_backward(&y, ls).unwrap();
        assert_eq!(g.shape(), &[n, c, ls]);
        assert_eq!(g.data()[3], y.data()[0]);
        assert_eq!(g.data()[0], 0.0);
    }

    #[test]
    fn parity_violation() {
        let a = Tensor::<f64>::zeros(&[1, 3]);
        assert!(residual_add(&a, &Tensor::zeros(&[1, 4])).is_err());
        assert!(residual_add(&a, &Tensor::zeros(&[1, 2])).is_err());
    }
}
