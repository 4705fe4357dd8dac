use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};

use super::loss::{diffusion_loss, LossConfig};
use super::schedule::NoiseSchedule;
use super::unet::{ClassTokens, Conditioning, NoisePredictor, UNet};
use crate::blocks::ForwardCtx;
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, collect_grads, AdamW};
use crate::tensor::{no_grad, DType, Tensor};

/// Isotropic two-dimensional Gaussian mixture.
#[derive(Clone, Debug)]
pub struct Gmm2d {
    pub means: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub std: f64,
}

impl Default for Gmm2d {
    fn default() -> Self {
        Gmm2d { means: vec![[1.2, 0.9], [-1.0, -0.6], [0.3, -1.2]], weights: vec![0.4, 0.35, 0.25], std: 0.25 }
    }
}

impl Gmm2d {
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Vec<[f64; 2]>, Vec<usize>)> {
        let pick = WeightedIndex::new(&self.weights).map_err(|e| Error::invalid(e.to_string()))?;
        let mut pts = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = pick.sample(rng);
            let m = self.means[k];
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            pts.push([m[0] + self.std * a, m[1] + self.std * b]);
            labels.push(k);
        }
        Ok((pts, labels))
    }

    /// `E[x xᵀ]` of the mixture.
    pub fn second_moments(&self) -> [[f64; 2]; 2] {
        let total: f64 = self.weights.iter().sum();
        let mut m = [[0.0; 2]; 2];
        for (mu, w) in self.means.iter().zip(&self.weights) {
            for i in 0..2 {
                for j in 0..2 {
                    m[i][j] += w / total * (mu[i] * mu[j] + if i == j { self.std * self.std } else { 0.0 });
                }
            }
        }
        m
    }
}

/// Empirical `E[x xᵀ]` of points stored as `(N, 2, 1, 1)`.
pub fn empirical_second_moments(x: &Tensor) -> [[f64; 2]; 2] {
    let n = x.dim(0) as f64;
    let mut m = [[0.0; 2]; 2];
    for p in x.data().chunks(2) {
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] += p[i] * p[j] / n;
            }
        }
    }
    m
}

/// Points as 1×1 latents `(N, 2, 1, 1)`.
pub fn as_latents(points: &[[f64; 2]], dtype: DType) -> Result<Tensor> {
    Tensor::from_vec(points.iter().flatten().copied().collect(), &[points.len(), 2, 1, 1], dtype)
}

/// Predicts zero noise everywhere.
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict_with(&self, z_t: &Tensor, _t: &[f64], _cond: &Conditioning, _ctx: &ForwardCtx) -> Result<Tensor> {
        Tensor::zeros(z_t.shape(), z_t.dtype())
    }
}

#[derive(Clone, Debug)]
pub struct ToyConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub p_uncond: f64,
    pub eval_size: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { iterations: 1500, batch_size: 128, lr: 2e-3, warmup: 50, p_uncond: 0.1, eval_size: 2048, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct ToyReport {
    pub zero_loss: f64,
    pub init_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Linear warmup, then cosine decay to a tenth of the peak.
fn toy_lr(cfg: &ToyConfig, it: usize) -> f64 {
    if it < cfg.warmup {
        return cfg.lr * (it + 1) as f64 / cfg.warmup as f64;
    }
    let p = (it - cfg.warmup) as f64 / (cfg.iterations - cfg.warmup).max(1) as f64;
    cfg.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Eval-mode loss over a fixed evaluation set and fixed noise draws.
pub fn eval_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    points: &Tensor,
    context: &Tensor,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LossConfig { p_uncond: 0.0, offset_noise: 0.0 };
    no_grad(|| diffusion_loss(model, points, Some(context), schedule, &cfg, &ForwardCtx::eval(), &mut rng)?.item())
}

/// Trains a class-conditional UNet on 1×1 latents drawn from `gmm`, each
/// sample conditioned on its mixture component.
pub fn train_gmm(model: &UNet, gmm: &Gmm2d, tokens: &ClassTokens, schedule: &NoiseSchedule, cfg: &ToyConfig) -> Result<ToyReport> {
    let dtype = model.conv_in.weight.dtype();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (eval_pts, eval_labels) = gmm.sample(cfg.eval_size, &mut rng)?;
    let eval_x = as_latents(&eval_pts, dtype)?;
    let eval_c = tokens.context(&eval_labels, dtype)?;
    let eval_seed = cfg.seed ^ 0x5eed;
    let zero_loss = eval_loss(&ZeroPredictor, &eval_x, &eval_c, schedule, eval_seed)?;
    let init_loss = eval_loss(model, &eval_x, &eval_c, schedule, eval_seed)?;
    let params = model.store().params();
    let mut opt = AdamW::new(&params, 0.9, 0.99, 0.0);
    let loss_cfg = LossConfig { p_uncond: cfg.p_uncond, offset_noise: 0.0 };
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (pts, labels) = gmm.sample(cfg.batch_size, &mut rng)?;
        let x = as_latents(&pts, dtype)?;
        let c = tokens.context(&labels, dtype)?;
        model.store().zero_grad();
        let ctx = ForwardCtx::train(rng.random());
        let loss = diffusion_loss(model, &x, Some(&c), schedule, &loss_cfg, &ctx, &mut rng)?;
        losses.push(loss.item()?);
        loss.backward()?;
        let mut grads = collect_grads(&params);
        clip_global_norm(&mut grads, 1.0);
        let lr = toy_lr(cfg, it);
        opt.step(&params, &grads, lr)?;
    }
    let final_loss = eval_loss(model, &eval_x, &eval_c, schedule, eval_seed)?;
    Ok(ToyReport { zero_loss, init_loss, final_loss, losses })
}
