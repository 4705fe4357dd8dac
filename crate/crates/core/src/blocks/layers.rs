use crate::error::Result;
use crate::param::{Builder, Init, Param};
use crate::tensor::{self, Tensor};

use super::ForwardCtx;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(b: &Builder, input: usize, output: usize, bias: bool) -> Result<Linear> {
        Ok(Linear {
            weight: b.param("weight", &[output, input], Init::TruncNormal(0.02))?,
            bias: if bias { Some(b.param("bias", &[output], Init::Zeros)?) } else { None },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.bias.as_ref().map(|b| b.value());
        tensor::linear(x, &self.weight.value(), b.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(b: &Builder, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Result<Conv2d> {
        Ok(Conv2d {
            weight: b.param("weight", &[cout, cin, k, k], Init::ConvFanOut)?,
            bias: if bias { Some(b.param("bias", &[cout], Init::Zeros)?) } else { None },
            stride,
            padding: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.bias.as_ref().map(|b| b.value());
        tensor::conv2d(x, &self.weight.value(), b.as_ref(), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(b: &Builder, channels: usize) -> Result<BatchNorm2d> {
        Ok(BatchNorm2d {
            weight: b.param("weight", &[channels], Init::Ones)?,
            bias: b.param("bias", &[channels], Init::Zeros)?,
            running_mean: b.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: b.buffer("running_var", &[channels], Init::Ones)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Batch statistics in training mode (running buffers updated with
    /// momentum and the unbiased variance), running statistics otherwise.
    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let (g, b) = (self.weight.value(), self.bias.value());
        if ctx.train {
            let (y, stats) = tensor::batch_norm(x, &g, &b, None, self.eps)?;
            let stats = stats.expect("training mode returns statistics");
            let m = self.momentum;
            let unbias = if stats.count > 1 { stats.count as f64 / (stats.count - 1) as f64 } else { 1.0 };
            let rm = self.running_mean.value();
            let rv = self.running_var.value();
            self.running_mean
                .set_data(rm.data().iter().zip(&stats.mean).map(|(r, s)| (1.0 - m) * r + m * s).collect())?;
            self.running_var
                .set_data(rv.data().iter().zip(&stats.var).map(|(r, s)| (1.0 - m) * r + m * s * unbias).collect())?;
            Ok(y)
        } else {
            let (rm, rv) = (self.running_mean.value(), self.running_var.value());
            Ok(tensor::batch_norm(x, &g, &b, Some((rm.data(), rv.data())), self.eps)?.0)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: Param,
    pub bias: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &Builder, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            weight: b.param("weight", &[dim], Init::Ones)?,
            bias: b.param("bias", &[dim], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::layer_norm(x, Some(&self.weight.value()), Some(&self.bias.value()), self.eps)
    }
}
