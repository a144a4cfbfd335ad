use super::{mish, mish_backward, BatchNorm1d, Conv1d, Dropout, Mode, Parameter, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// `conv -> batch norm -> Mish -> dropout`, the repeating layer of both
/// the lifter and the quality classifier.
#[derive(Debug, Clone)]
pub struct ConvUnit<T> {
    pub conv: Conv1d<T>,
    pub bn: BatchNorm1d<T>,
    pub dropout: Dropout<T>,
    pre_act: Option<Tensor<T>>,
}

impl<T: Scalar> ConvUnit<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        dropout_rate: f64,
        rng: &mut SplitMix64,
    ) -> Self {
        Self {
            conv: Conv1d::new(&format!("{name}.conv"), c_in, c_out, kernel, dilation, rng),
            bn: BatchNorm1d::new(&format!("{name}.bn"), c_out),
            dropout: Dropout::new(dropout_rate),
            pre_act: None,
        }
    }

    /// Forward pass that caches what `backward` needs when `mode` is train.
    pub fn forward(&mut self, x: Tensor<T>, mode: Mode, seed: u64) -> Result<Tensor<T>> {
        let train = mode == Mode::Train;
        let y = self.conv.forward(x, train)?;
        let z = self.bn.forward(&y, mode)?;
        let a = mish(&z);
        self.pre_act = train.then_some(z);
        self.dropout.forward(&a, mode, seed)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv.infer(x)?;
        Ok(mish(&self.bn.infer(&y)?))
    }

    pub fn backward(&mut self, grad_out: Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let z = self
            .pre_act
            .take()
            .ok_or_else(|| Error::InvalidConfig("backward called without a train-mode forward".into()))?;
        let g = self.dropout.backward(grad_out);
        let g = mish_backward(&z, &g);
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g, need_input_grad)
    }

    pub fn parameters(&self) -> [&Parameter<T>; 4] {
        [&self.conv.weight, &self.conv.bias, &self.bn.gamma, &self.bn.beta]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter<T>; 4] {
        [
            &mut self.conv.weight,
            &mut self.conv.bias,
            &mut self.bn.gamma,
            &mut self.bn.beta,
        ]
    }
}
