use rand::Rng;

use super::schedule::{add_offset_noise, NoiseSchedule};
use super::unet::{Conditioning, NoisePredictor};
use crate::blocks::ForwardCtx;
use crate::error::{Error, Result};
use crate::tensor::{mse_loss, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Probability of replacing a sample's context by the null token.
    pub p_uncond: f64,
    pub offset_noise: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { p_uncond: 0.1, offset_noise: 0.0 }
    }
}

/// Noise-prediction objective: `t ~ U{1..T}`, `ε ~ N(0, I)` per sample,
/// mean squared error between the (offset) noise and the prediction at
/// `z_t`. Without a context the null token is used for every sample.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    z: &Tensor,
    context: Option<&Tensor>,
    schedule: &NoiseSchedule,
    cfg: &LossConfig,
    ctx: &ForwardCtx,
    rng: &mut R,
) -> Result<Tensor> {
    let n = z.dim(0);
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = Tensor::randn(z.shape(), 1.0, z.dtype(), rng)?;
    let noise = add_offset_noise(&eps, cfg.offset_noise, rng)?;
    let z_t = schedule.q_sample(z, &t, &noise, 0.0, rng)?;
    let cond = match context {
        Some(c) => {
            let drop = (0..n).map(|_| rng.random::<f64>() < cfg.p_uncond).collect();
            Conditioning::Mixed { context: c.clone(), drop }
        }
        None => Conditioning::Null { len: 1 },
    };
    let tf: Vec<f64> = t.iter().map(|&s| s as f64).collect();
    let pred = model.predict_with(&z_t, &tf, &cond, ctx)?;
    let loss = mse_loss(&pred, &noise)?;
    let v = loss.item()?;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("diffusion loss is {v}")));
    }
    Ok(loss)
}
