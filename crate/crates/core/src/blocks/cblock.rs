use super::layers::{BatchNorm2d, Conv2d, Linear};
use super::{drop_path, ForwardCtx};
use crate::error::{Error, Result};
use crate::param::Builder;
use crate::tensor::{self, Tensor};

pub const EXPANSION: usize = 4;
pub const SE_RATIO: f64 = 0.25;

/// Squeeze-excite gate: global pool, two linears, sigmoid.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub reduce: Linear,
    pub expand: Linear,
}

impl SqueezeExcite {
    pub fn new(b: &Builder, channels: usize, hidden: usize) -> Result<SqueezeExcite> {
        Ok(SqueezeExcite {
            reduce: Linear::new(&b.pp("reduce"), channels, hidden, true)?,
            expand: Linear::new(&b.pp("expand"), hidden, channels, true)?,
        })
    }

    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c) = (x.dim(0), x.dim(1));
        let s = tensor::global_avg_pool(x)?;
        let s = self.expand.forward(&tensor::gelu(&self.reduce.forward(&s)?))?;
        tensor::sigmoid(&s).reshape(&[n, c, 1, 1])
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.mul(&self.gate(x)?)
    }
}

/// Downsampling map: optional 2×2 average pool then a 1×1 conv with bias.
#[derive(Clone, Debug)]
pub struct Transition {
    pub pool: bool,
    pub conv: Conv2d,
}

impl Transition {
    pub fn new(b: &Builder, cin: usize, cout: usize, stride: usize) -> Result<Transition> {
        Ok(Transition { pool: stride == 2, conv: Conv2d::new(b, cin, cout, 1, 1, true)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.pool {
            self.conv.forward(&tensor::avg_pool2d(x)?)
        } else {
            self.conv.forward(x)
        }
    }
}

/// Fused inverted-bottleneck block:
/// `Y = shortcut(X) + P(SE(GeLU(BN(Conv3×3(X)) [+ time shift])))`.
#[derive(Clone, Debug)]
pub struct CBlock {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub expand: Conv2d,
    pub norm: BatchNorm2d,
    pub time_proj: Option<Linear>,
    pub se: SqueezeExcite,
    pub project: Conv2d,
    pub shortcut: Option<Transition>,
    pub drop_rate: f64,
}

pub fn se_hidden(cout: usize) -> usize {
    ((cout as f64 * SE_RATIO).round() as usize).max(1)
}

impl CBlock {
    pub fn new(
        b: &Builder,
        cin: usize,
        cout: usize,
        stride: usize,
        time_dim: Option<usize>,
        drop_rate: f64,
    ) -> Result<CBlock> {
        let mid = EXPANSION * cout;
        Ok(CBlock {
            cin,
            cout,
            stride,
            expand: Conv2d::new(&b.pp("expand"), cin, mid, 3, stride, false)?,
            norm: BatchNorm2d::new(&b.pp("norm"), mid)?,
            time_proj: time_dim.map(|t| Linear::new(&b.pp("time_proj"), t, mid, true)).transpose()?,
            se: SqueezeExcite::new(&b.pp("se"), mid, se_hidden(cout))?,
            project: Conv2d::new(&b.pp("project"), mid, cout, 1, 1, true)?,
            shortcut: if stride != 1 || cin != cout {
                Some(Transition::new(&b.pp("shortcut"), cin, cout, stride)?)
            } else {
                None
            },
            drop_rate,
        })
    }

    /// Expanded, normalised features with the time shift applied (before GeLU).
    pub fn pre_activation(&self, x: &Tensor, time_embed: Option<&Tensor>, ctx: &ForwardCtx) -> Result<Tensor> {
        if x.rank() != 4 || x.dim(1) != self.cin {
            return Err(Error::shape("c_block", format!("expected (N, {}, H, W), got {:?}", self.cin, x.shape())));
        }
        let h = self.norm.forward(&self.expand.forward(x)?, ctx)?;
        match (&self.time_proj, time_embed) {
            (Some(proj), Some(t)) => {
                let shift = proj.forward(&tensor::silu(t))?;
                let (n, c) = (shift.dim(0), shift.dim(1));
                h.add(&shift.reshape(&[n, c, 1, 1])?)
            }
            (Some(_), None) => Err(Error::invalid("conditioned C block needs a time embedding")),
            (None, _) => Ok(h),
        }
    }

    pub fn forward(&self, x: &Tensor, time_embed: Option<&Tensor>, ctx: &ForwardCtx) -> Result<Tensor> {
        let h = tensor::gelu(&self.pre_activation(x, time_embed, ctx)?);
        let branch = self.project.forward(&self.se.forward(&h)?)?;
        let branch = drop_path(&branch, self.drop_rate, ctx)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        skip.add(&branch)
    }
}
