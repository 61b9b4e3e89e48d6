use crate::autograd::{BatchNormStats, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{BnUpdate, Ctx, ParamId, ParamKind, ParamRegistry};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Registers parameters under a dotted name prefix.
///
/// Values are placeholders until [`init_params`](super::init_params) runs.
pub struct Builder<'r, T: Scalar> {
    reg: &'r mut ParamRegistry<T>,
    prefix: String,
}

impl<'r, T: Scalar> Builder<'r, T> {
    pub fn new(reg: &'r mut ParamRegistry<T>) -> Self {
        Builder {
            reg,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        Builder {
            prefix: self.qualify(name),
            reg: self.reg,
        }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn add(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let full = self.qualify(name);
        self.reg.add(full, kind, value)
    }

    pub fn conv(&mut self, cin: usize, cout: usize, k: usize, pad: usize, bias: bool) -> Result<Conv> {
        if cin == 0 || cout == 0 || k == 0 {
            return Err(Error::Config(format!("conv {}: zero-sized layer", self.prefix)));
        }
        let weight = self.add("weight", ParamKind::Weight { fan_in: cin * k * k }, Tensor::zeros([cout, cin, k, k]))?;
        let bias = if bias {
            Some(self.add("bias", ParamKind::Bias, Tensor::zeros([cout]))?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            stride: 1,
            pad,
        })
    }

    pub fn batch_norm(&mut self, channels: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.add("gamma", ParamKind::BnGamma, Tensor::ones([channels]))?,
            beta: self.add("beta", ParamKind::BnBeta, Tensor::zeros([channels]))?,
            mean: self.add("running_mean", ParamKind::RunningMean, Tensor::zeros([channels]))?,
            var: self.add("running_var", ParamKind::RunningVar, Tensor::ones([channels]))?,
            tracked: self.add("tracked", ParamKind::Tracked, Tensor::zeros([1]))?,
            name: self.prefix.clone(),
        })
    }

    /// Convolution (no bias) followed by batch norm and ReLU; `k`×`k`, same padding.
    pub fn conv_norm(&mut self, cin: usize, cout: usize, k: usize) -> Result<ConvNorm> {
        Ok(ConvNorm {
            conv: self.scope("conv").conv(cin, cout, k, k / 2, false)?,
            bn: self.scope("bn").batch_norm(cout)?,
        })
    }

    pub fn transpose_conv(&mut self, cin: usize, cout: usize, k: usize, stride: usize) -> Result<TransposeConv> {
        let fan_in = (cin * k * k / (stride * stride)).max(1);
        Ok(TransposeConv {
            weight: self.add("weight", ParamKind::Weight { fan_in }, Tensor::zeros([cin, cout, k, k]))?,
            stride,
        })
    }

    pub fn linear(&mut self, cin: usize, cout: usize) -> Result<Linear> {
        Ok(Linear {
            weight: self.add("weight", ParamKind::Weight { fan_in: cin }, Tensor::zeros([cout, cin]))?,
            bias: self.add("bias", ParamKind::Bias, Tensor::zeros([cout]))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let bias = self.bias.map(|b| cx.param(b));
        x.conv2d(cx.param(self.weight), bias, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
    pub tracked: ParamId,
    pub name: String,
}

impl BatchNorm {
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let running = BatchNormStats {
            mean: cx.params.value(self.mean).clone(),
            var: cx.params.value(self.var).clone(),
            tracked: cx.params.value(self.tracked).item().as_f64() as u64,
        };
        let (y, stats) = x.batchnorm2d(
            cx.param(self.gamma),
            cx.param(self.beta),
            &running,
            cx.mode,
            T::lit(BN_MOMENTUM),
            T::lit(BN_EPS),
            &self.name,
        )?;
        if let Some(stats) = stats {
            cx.push_bn_update(BnUpdate {
                mean: self.mean,
                var: self.var,
                tracked: self.tracked,
                stats,
            });
        }
        Ok(y)
    }
}

/// The "normalized convolution": conv, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvNorm {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvNorm {
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.conv.forward(cx, x)?;
        Ok(self.bn.forward(cx, y)?.relu())
    }
}

#[derive(Clone, Debug)]
pub struct TransposeConv {
    pub weight: ParamId,
    pub stride: usize,
}

impl TransposeConv {
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.transpose_conv2d(cx.param(self.weight), None, self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(cx.param(self.weight), cx.param(self.bias))
    }
}
