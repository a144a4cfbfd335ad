use super::{gemm, Mat, Parameter, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub fn conv1d_output_len(len: usize, kernel: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1);
    len.checked_sub(span).filter(|&l| l > 0)
}

/// Unfolds one `[C_in, L]` sample into `[C_in * K, L_out]` columns.
fn im2col<T: Scalar>(x: &[T], c_in: usize, len: usize, kernel: usize, dilation: usize, l_out: usize, cols: &mut [T]) {
    for c in 0..c_in {
        let row = &x[c * len..(c + 1) * len];
        for k in 0..kernel {
            let off = k * dilation;
            let dst = &mut cols[(c * kernel + k) * l_out..(c * kernel + k + 1) * l_out];
            dst.copy_from_slice(&row[off..off + l_out]);
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], c_in: usize, len: usize, kernel: usize, dilation: usize, l_out: usize, dx: &mut [T]) {
    for c in 0..c_in {
        let row = &mut dx[c * len..(c + 1) * len];
        for k in 0..kernel {
            let off = k * dilation;
            let src = &cols[(c * kernel + k) * l_out..(c * kernel + k + 1) * l_out];
            for (d, &s) in row[off..off + l_out].iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
}

fn check_shapes<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dilation: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c_in, len) = input.dims3("conv1d")?;
    let [c_out, wc_in, kernel] = *weight.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "conv1d weight must be [C_out, C_in, K], got {:?}",
            weight.shape()
        )));
    };
    if wc_in != c_in {
        return Err(Error::ShapeMismatch(format!(
            "conv1d input has {c_in} channels, weight expects {wc_in}"
        )));
    }
    if dilation == 0 || kernel == 0 {
        return Err(Error::InvalidConfig("conv1d needs dilation >= 1 and kernel >= 1".into()));
    }
    let l_out = conv1d_output_len(len, kernel, dilation).ok_or(Error::InputTooShort {
        required: dilation * (kernel - 1) + 1,
        actual: len,
    })?;
    Ok((n, c_in, len, c_out, kernel, l_out))
}

/// Valid (unpadded) dilated cross-correlation:
/// `out[n, o, t] = bias[o] + sum_{c,k} w[o, c, k] * x[n, c, t + k * dilation]`.
pub fn conv1d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let (n, c_in, len, c_out, kernel, l_out) = check_shapes(input, weight, dilation)?;
    if bias.len() != c_out {
        return Err(Error::ShapeMismatch(format!(
            "conv1d bias has {} entries, expected {c_out}",
            bias.len()
        )));
    }
    let rows = c_in * kernel;
    let pointwise = kernel == 1;
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); rows * l_out] };
    let mut out = vec![T::zero(); n * c_out * l_out];
    let w = Mat::new(weight.data(), c_out, rows);
    for s in 0..n {
        let x = &input.data()[s * c_in * len..(s + 1) * c_in * len];
        let o = &mut out[s * c_out * l_out..(s + 1) * c_out * l_out];
        for (row, &b) in o.chunks_exact_mut(l_out).zip(bias.data()) {
            row.fill(b);
        }
        if pointwise {
            gemm(w, Mat::new(x, c_in, len), T::one(), o);
        } else {
            im2col(x, c_in, len, kernel, dilation, l_out, &mut cols);
            gemm(w, Mat::new(&cols, rows, l_out), T::one(), o);
        }
    }
    let shape: Vec<usize> = if input.shape().len() == 2 {
        vec![c_out, l_out]
    } else {
        vec![n, c_out, l_out]
    };
    Tensor::from_vec(&shape, out)
}

/// Accumulates weight and bias gradients and returns the input gradient
/// when `need_input_grad` is set.
pub fn conv1d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dilation: usize,
    grad_out: &Tensor<T>,
    grad_weight: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
    need_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let (n, c_in, len, c_out, kernel, l_out) = check_shapes(input, weight, dilation)?;
    if grad_out.len() != n * c_out * l_out {
        return Err(Error::ShapeMismatch(format!(
            "conv1d grad_out has shape {:?}, expected [{n}, {c_out}, {l_out}]",
            grad_out.shape()
        )));
    }
    let rows = c_in * kernel;
    let pointwise = kernel == 1;
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); rows * l_out] };
    let mut dcols = vec![T::zero(); rows * l_out];
    let mut dx = if need_input_grad {
        vec![T::zero(); input.len()]
    } else {
        Vec::new()
    };
    let w = Mat::new(weight.data(), c_out, rows);
    for s in 0..n {
        let x = &input.data()[s * c_in * len..(s + 1) * c_in * len];
        let g = &grad_out.data()[s * c_out * l_out..(s + 1) * c_out * l_out];
        let g_mat = Mat::new(g, c_out, l_out);
        for (gb, row) in grad_bias.data_mut().iter_mut().zip(g.chunks_exact(l_out)) {
            *gb = *gb + row.iter().copied().sum();
        }
        let x_cols = if pointwise {
            Mat::new(x, c_in, len)
        } else {
            im2col(x, c_in, len, kernel, dilation, l_out, &mut cols);
            Mat::new(&cols, rows, l_out)
        };
        gemm(g_mat, x_cols.t(), T::one(), grad_weight.data_mut());
        if need_input_grad {
            let dxs = &mut dx[s * c_in * len..(s + 1) * c_in * len];
            if pointwise {
                gemm(w.t(), g_mat, T::one(), dxs);
            } else {
                gemm(w.t(), g_mat, T::zero(), &mut dcols);
                col2im_add(&dcols, c_in, len, kernel, dilation, l_out, dxs);
            }
        }
    }
    if need_input_grad {
        Ok(Some(Tensor::from_vec(input.shape(), dx)?))
    } else {
        Ok(None)
    }
}

/// Convolution layer owning its parameters and the input cached for backward.
#[derive(Debug, Clone)]
pub struct Conv1d<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub dilation: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv1d<T> {
    /// Uniform fan-in initialization: weights ~ U(-b, b) with
    /// `b = 1 / sqrt(C_in * K)`, biases zero.
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let w: Vec<T> = (0..c_out * c_in * kernel)
            .map(|_| T::of(rng.uniform_range(-bound, bound)))
            .collect();
        Self {
            weight: Parameter::new(
                format!("{name}.weight"),
                Tensor::from_vec(&[c_out, c_in, kernel], w).expect("shape"),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            dilation,
            input: None,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward(&mut self, x: Tensor<T>, keep: bool) -> Result<Tensor<T>> {
        let y = conv1d(&x, &self.weight.value, &self.bias.value, self.dilation)?;
        self.input = keep.then_some(x);
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv1d(x, &self.weight.value, &self.bias.value, self.dilation)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::InvalidConfig("conv1d backward called without a cached forward".into()))?;
        conv1d_backward(
            &x,
            &self.weight.value,
            self.dilation,
            grad_out,
            &mut self.weight.grad,
            &mut self.bias.grad,
            need_input_grad,
        )
    }
}
