use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::curriculum::StageRecipe;
use super::loss::{diffusion_loss, LossConfig};
use super::schedule::NoiseSchedule;
use super::unet::{ClassTokens, UNet};
use crate::blocks::ForwardCtx;
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, collect_grads, AdamW};
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiffTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub p_uncond: f64,
    pub offset_noise: f64,
    pub seed: u64,
}

impl DiffTrainConfig {
    /// Settings from a (possibly scaled) curriculum stage. Stages without a
    /// published iteration count or batch size need both overridden.
    pub fn from_stage(recipe: &StageRecipe, seed: u64) -> Result<DiffTrainConfig> {
        let missing = || Error::Config(format!("{:?} has no published iteration count or batch size", recipe.stage));
        let iterations = recipe.iterations.ok_or_else(missing)? as usize;
        Ok(DiffTrainConfig {
            iterations,
            batch_size: recipe.batch_size.ok_or_else(missing)? as usize,
            lr: recipe.lr,
            warmup: (iterations / 20).min(1000),
            betas: recipe.betas,
            weight_decay: 0.0,
            grad_clip_norm: 1.0,
            p_uncond: 0.1,
            offset_noise: recipe.offset_noise,
            seed,
        })
    }

    pub fn lr_at(&self, it: usize) -> f64 {
        if it < self.warmup {
            self.lr * (it + 1) as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DiffStep {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Minimises the noise-prediction loss on batches from `data`, which
/// returns `(latents, context)` for a batch size.
pub fn train_diffusion(
    model: &UNet,
    schedule: &NoiseSchedule,
    cfg: &DiffTrainConfig,
    mut data: impl FnMut(usize, &mut ChaCha8Rng) -> Result<(Tensor, Tensor)>,
    mut metrics: Option<&mut dyn Write>,
) -> Result<Vec<DiffStep>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let params = model.store().params();
    let mut opt = AdamW::new(&params, cfg.betas.0, cfg.betas.1, cfg.weight_decay);
    let loss_cfg = LossConfig { p_uncond: cfg.p_uncond, offset_noise: cfg.offset_noise };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut steps = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (x, c) = data(cfg.batch_size, &mut rng)?;
        model.store().zero_grad();
        let ctx = ForwardCtx::train(rng.random());
        let loss = diffusion_loss(model, &x, Some(&c), schedule, &loss_cfg, &ctx, &mut rng)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("loss is {value} at step {it}")));
        }
        loss.backward()?;
        let mut grads = collect_grads(&params);
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
        let lr = cfg.lr_at(it);
        opt.step(&params, &grads, lr)?;
        let rec = DiffStep { step: it, lr, loss: value, grad_norm };
        if let Some(w) = metrics.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec).map_err(|e| Error::Serialization(e.to_string()))?;
            writeln!(w)?;
        }
        steps.push(rec);
    }
    Ok(steps)
}

/// Synthetic class-conditional latents: a fixed smooth pattern per class
/// plus isotropic noise.
#[derive(Clone, Debug)]
pub struct PatternLatents {
    pub shape: [usize; 3],
    pub noise: f64,
    patterns: Vec<Vec<f64>>,
}

impl PatternLatents {
    pub fn new(num_classes: usize, shape: [usize; 3], noise: f64, seed: u64) -> PatternLatents {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c, h, w] = shape;
        let patterns = (0..num_classes)
            .map(|_| {
                let amp: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
                let (fy, fx, phase): (f64, f64, f64) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5), rng.random_range(0.0..6.3));
                (0..c * h * w)
                    .map(|i| {
                        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
                        amp[ch] * (fy * y as f64 / h as f64 * 3.0 + fx * x as f64 / w as f64 * 3.0 + phase).sin()
                    })
                    .collect()
            })
            .collect();
        PatternLatents { shape, noise, patterns }
    }

    pub fn num_classes(&self) -> usize {
        self.patterns.len()
    }

    pub fn batch<R: Rng + ?Sized>(&self, n: usize, dtype: DType, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.patterns.len())).collect();
        let mut data = Vec::with_capacity(n * self.patterns[0].len());
        for &l in &labels {
            for v in &self.patterns[l] {
                let e: f64 = StandardNormal.sample(rng);
                data.push(v + self.noise * e);
            }
        }
        let [c, h, w] = self.shape;
        Ok((Tensor::from_vec(data, &[n, c, h, w], dtype)?, labels))
    }

    /// Data source for `train_diffusion` conditioned through `tokens`.
    pub fn source<'a>(
        &'a self,
        tokens: &'a ClassTokens,
        dtype: DType,
    ) -> impl FnMut(usize, &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> + 'a {
        move |n, rng| {
            let (x, labels) = self.batch(n, dtype, rng)?;
            Ok((x, tokens.context(&labels, dtype)?))
        }
    }
}
