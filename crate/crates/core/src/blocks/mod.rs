//! Network building blocks: the convolution (C) and transformer (T) blocks,
//! their time/context-conditioned variants, stem, classifier head and
//! stochastic depth.

mod cblock;
mod embed;
mod layers;
mod stage;
mod stem;
mod tblock;

pub use cblock::{CBlock, SqueezeExcite, Transition};
pub use embed::{timestep_embedding, TimeEmbed};
pub use layers::{BatchNorm2d, Conv2d, LayerNorm, Linear};
pub use stage::{build_stage, drop_schedule, is_transition, StageBlock, StageOptions};
pub use stem::{ClassifierHeadLayer, Stem};
pub use tblock::{tokens_to_map, map_to_tokens, CrossAttention, QkNorm, RelPosBias, TBlock, TBlockConfig};

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Per-forward settings: training mode and the generator used by
/// stochastic depth.
pub struct ForwardCtx {
    pub train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> ForwardCtx {
        ForwardCtx { train: false, rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)) }
    }

    pub fn train(seed: u64) -> ForwardCtx {
        ForwardCtx { train: true, rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn uniform(&self) -> f64 {
        self.rng.borrow_mut().random::<f64>()
    }
}

/// Stochastic depth on a residual branch of shape `[N, ...]`: in training
/// each sample's branch is dropped with probability `rate` and survivors are
/// scaled by `1/(1-rate)`; identity in eval mode.
pub fn drop_path(branch: &Tensor, rate: f64, ctx: &ForwardCtx) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("stochastic depth rate must lie in [0, 1), got {rate}")));
    }
    if !ctx.train || rate == 0.0 {
        return Ok(branch.clone());
    }
    let n = branch.dim(0);
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..n).map(|_| if ctx.uniform() < keep { 1.0 / keep } else { 0.0 }).collect();
    let mut shape = vec![1; branch.rank()];
    shape[0] = n;
    let dtype = if branch.dtype() == DType::F64 { DType::F64 } else { DType::F32 };
    branch.mul(&Tensor::from_vec(mask, &shape, dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drop_path_identity_cases() {
        let x = Tensor::ones(&[4, 3], DType::F64).unwrap();
        assert_eq!(drop_path(&x, 0.0, &ForwardCtx::train(1)).unwrap().data(), x.data());
        assert_eq!(drop_path(&x, 0.5, &ForwardCtx::eval()).unwrap().data(), x.data());
        assert!(drop_path(&x, 1.0, &ForwardCtx::eval()).is_err());
        assert!(drop_path(&x, -0.1, &ForwardCtx::eval()).is_err());
    }

    #[test]
    fn drop_path_monte_carlo() {
        let n = 100_000;
        let rate = 0.3;
        let x = Tensor::ones(&[n, 1], DType::F64).unwrap();
        let y = drop_path(&x, rate, &ForwardCtx::train(7)).unwrap();
        let survived = y.data().iter().filter(|&&v| v > 0.0).count() as f64;
        let p = 1.0 - rate;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((survived - n as f64 * p).abs() < 3.0 * sigma);
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02);
    }
}
