use super::layers::Linear;
use crate::error::Result;
use crate::param::Builder;
use crate::tensor::{self, DType, Tensor};

/// Sinusoidal encoding `[cos(t·f_k), sin(t·f_k)]` with
/// `f_k = 10000^(-k/half)`, one row per timestep.
pub fn timestep_embedding(t: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let row_start = data.len();
        for k in 0..half {
            let f = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            data.push((step * f).cos());
        }
        for k in 0..half {
            let f = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            data.push((step * f).sin());
        }
        data.resize(row_start + dim, 0.0);
    }
    Tensor::from_vec(data, &[t.len(), dim], dtype)
}

/// Sinusoid followed by two linear layers with SiLU between.
#[derive(Clone, Debug)]
pub struct TimeEmbed {
    pub base_dim: usize,
    pub linear1: Linear,
    pub linear2: Linear,
}

impl TimeEmbed {
    pub fn new(b: &Builder, base_dim: usize, dim: usize) -> Result<TimeEmbed> {
        Ok(TimeEmbed {
            base_dim,
            linear1: Linear::new(&b.pp("linear1"), base_dim, dim, true)?,
            linear2: Linear::new(&b.pp("linear2"), dim, dim, true)?,
        })
    }

    pub fn forward(&self, t: &[f64], dtype: DType) -> Result<Tensor> {
        let s = timestep_embedding(t, self.base_dim, dtype)?;
        self.linear2.forward(&tensor::silu(&self.linear1.forward(&s)?))
    }
}
