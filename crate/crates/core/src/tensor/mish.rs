use super::{Scalar, Tensor};

/// `ln(1 + e^x)` without overflow for large `|x|`.
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn mish_scalar<T: Scalar>(x: T) -> T {
    x * softplus(x).tanh()
}

/// `d/dx [x tanh(sp(x))] = tanh(sp) + x (1 - tanh^2(sp)) sigmoid(x)`.
pub fn mish_scalar_grad<T: Scalar>(x: T) -> T {
    let th = softplus(x).tanh();
    let sig = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    th + x * (T::one() - th * th) * sig
}

pub fn mish<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(mish_scalar)
}

pub fn mish_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| g * mish_scalar_grad(x))
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::finite_difference_check;

    #[test]
    fn known_values() {
        assert_eq!(mish_scalar(0.0f64), 0.0);
        // 1 * tanh(ln(1 + e))
        let expected = (1.0f64 + std::f64::consts::E).ln().tanh();
        assert!((mish_scalar(1.0f64) - expected).abs() < 1e-15);
        assert!((mish_scalar(1.0f64) - 0.865098).abs() < 1e-6);
    }

    #[test]
    fn large_inputs_do_not_overflow() {
        assert_eq!(mish_scalar(1000.0f64), 1000.0);
        assert!(mish_scalar(-1000.0f64).abs() < 1e-300);
        assert!(mish_scalar(100.0f32).is_finite());
        assert!(mish_scalar_grad(-800.0f64).is_finite());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for x in [-2.0, 0.5, 3.0] {
            let g = [mish_scalar_grad(x)];
            let err = finite_difference_check(|v| mish_scalar(v[0]), &[x], &g, 1e-5);
            assert!(err < 1e-8, "x={x} err={err}");
        }
    }
}
