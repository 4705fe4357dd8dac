use super::layers::{BatchNorm2d, Conv2d, Linear};
use super::ForwardCtx;
use crate::error::{Error, Result};
use crate::param::Builder;
use crate::tensor::{self, Tensor};

/// 3×3 convolutions with BN and GeLU; only the first is strided.
#[derive(Clone, Debug)]
pub struct Stem {
    pub layers: Vec<(Conv2d, BatchNorm2d)>,
}

impl Stem {
    pub fn new(b: &Builder, cin: usize, cout: usize, convs: usize, stride: usize) -> Result<Stem> {
        let mut layers = Vec::with_capacity(convs);
        for i in 0..convs {
            let (ci, s) = if i == 0 { (cin, stride) } else { (cout, 1) };
            layers.push((
                Conv2d::new(&b.pp(format!("conv{i}")), ci, cout, 3, s, false)?,
                BatchNorm2d::new(&b.pp(format!("norm{i}")), cout)?,
            ));
        }
        Ok(Stem { layers })
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let mut h = x.clone();
        for (conv, norm) in &self.layers {
            if h.dim(2) < 2 || h.dim(3) < 2 {
                return Err(Error::shape("stem", format!("input {:?} is too small to downsample", x.shape())));
            }
            h = tensor::gelu(&norm.forward(&conv.forward(&h)?, ctx)?);
        }
        Ok(h)
    }
}

/// 1×1 conv to the embedding width, BN, GeLU, global pool, linear.
#[derive(Clone, Debug)]
pub struct ClassifierHeadLayer {
    pub conv: Conv2d,
    pub norm: BatchNorm2d,
    pub fc: Linear,
}

impl ClassifierHeadLayer {
    pub fn new(b: &Builder, cin: usize, embed: usize, classes: usize) -> Result<ClassifierHeadLayer> {
        Ok(ClassifierHeadLayer {
            conv: Conv2d::new(&b.pp("conv"), cin, embed, 1, 1, false)?,
            norm: BatchNorm2d::new(&b.pp("norm"), embed)?,
            fc: Linear::new(&b.pp("fc"), embed, classes, true)?,
        })
    }

    pub fn pre_logits(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let h = tensor::gelu(&self.norm.forward(&self.conv.forward(x)?, ctx)?);
        tensor::global_avg_pool(&h)
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        self.fc.forward(&self.pre_logits(x, ctx)?)
    }
}
