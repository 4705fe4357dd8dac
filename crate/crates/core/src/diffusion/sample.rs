use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::guidance::{cfg_combine, GuidanceSchedule};
use super::schedule::NoiseSchedule;
use super::unet::{Conditioning, NoisePredictor};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Respaced timesteps `τ_k = ⌊k·T/S⌋` for `k = 0..=S`.
pub fn respace(schedule: &NoiseSchedule, steps: usize) -> Result<Vec<usize>> {
    let t = schedule.steps();
    if steps == 0 || steps > t {
        return Err(Error::Config(format!("sampling steps must lie in [1, {t}], got {steps}")));
    }
    Ok((0..=steps).map(|k| k * t / steps).collect())
}

fn unconditional(cond: &Conditioning) -> Option<Conditioning> {
    match cond {
        Conditioning::Context(c) => Some(Conditioning::Null { len: c.dim(1) }),
        Conditioning::Mixed { context, .. } => Some(Conditioning::Null { len: context.dim(1) }),
        Conditioning::Null { .. } => None,
    }
}

/// Guided prediction; the unconditional pass is skipped when the scale is 1
/// or there is nothing to guide against.
fn guided<M: NoisePredictor + ?Sized>(model: &M, z: &Tensor, t: usize, cond: &Conditioning, scale: f64) -> Result<Tensor> {
    let tv = vec![t as f64; z.dim(0)];
    let eps_c = model.predict(z, &tv, cond)?;
    match unconditional(cond) {
        Some(u) if scale != 1.0 => cfg_combine(&eps_c, &model.predict(z, &tv, &u)?, scale),
        _ => Ok(eps_c),
    }
}

fn axpby(a: f64, x: &[f64], b: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(x, y)| a * x + b * y).collect()
}

/// Ancestral sampling over `steps` respaced timesteps from `z_T ~ N(0, I)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_ddpm<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    guidance: &GuidanceSchedule,
    steps: usize,
    shape: &[usize],
    cond: &Conditioning,
    seed: u64,
    dtype: DType,
) -> Result<Tensor> {
    guidance.validate(steps)?;
    let taus = respace(schedule, steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Tensor::randn(shape, 1.0, dtype, &mut rng)?;
    for k in (1..=steps).rev() {
        let (t, t_prev) = (taus[k], taus[k - 1]);
        let scale = guidance.at(steps - k + 1, steps);
        let eps = guided(model, &z, t, cond, scale)?;
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let zv = z.values("sample_ddpm")?;
        let x0 = axpby(1.0 / ab.sqrt(), zv, -(1.0 - ab).sqrt() / ab.sqrt(), eps.values("sample_ddpm")?);
        let next = if t_prev == 0 {
            x0
        } else {
            let beta = 1.0 - ab / ab_prev;
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let std = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            let noise = Tensor::randn(shape, 1.0, DType::F64, &mut rng)?;
            x0.iter()
                .zip(zv)
                .zip(noise.data())
                .map(|((x0, z), n)| c0 * x0 + ct * z + std * n)
                .collect()
        };
        z = Tensor::from_vec(next, shape, dtype)?;
    }
    Ok(z)
}

/// Second-order Heun integration of `dx/dσ = f(x, i, step)` across
/// `sigmas`; `f` receives the index into `sigmas` and the 1-based step it
/// serves. A final step into `σ = 0` is a plain Euler step.
pub fn heun_integrate(
    mut x: Vec<f64>,
    sigmas: &[f64],
    mut f: impl FnMut(&[f64], usize, usize) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    for i in 0..sigmas.len().saturating_sub(1) {
        let h = sigmas[i + 1] - sigmas[i];
        let d = f(&x, i, i + 1)?;
        let euler = axpby(1.0, &x, h, &d);
        x = if sigmas[i + 1] == 0.0 {
            euler
        } else {
            let d2 = f(&euler, i + 1, i + 1)?;
            x.iter().zip(d.iter().zip(&d2)).map(|(x, (a, b))| x + 0.5 * h * (a + b)).collect()
        };
    }
    Ok(x)
}

/// Deterministic Heun sampler for the probability-flow ODE in
/// `x = z/√ᾱ` over `σ = √((1−ᾱ)/ᾱ)`, where `dx/dσ = ε̂`.
#[allow(clippy::too_many_arguments)]
pub fn sample_heun<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    guidance: &GuidanceSchedule,
    steps: usize,
    shape: &[usize],
    cond: &Conditioning,
    seed: u64,
    dtype: DType,
) -> Result<Tensor> {
    if steps < 2 {
        return Err(Error::Config("Heun sampling needs at least 2 steps".into()));
    }
    guidance.validate(steps)?;
    let taus = respace(schedule, steps)?;
    // descending timesteps, ending at t = 0 (σ = 0)
    let ts: Vec<usize> = taus.iter().rev().copied().collect();
    let sigmas: Vec<f64> = ts.iter().map(|&t| schedule.sigma(t)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Tensor::randn(shape, 1.0, dtype, &mut rng)?;
    let x0: Vec<f64> = noise.data().iter().map(|v| v * (sigmas[0] * sigmas[0] + 1.0).sqrt()).collect();
    let x = heun_integrate(x0, &sigmas, |x, i, step| {
        let scale_in = 1.0 / (sigmas[i] * sigmas[i] + 1.0).sqrt();
        let z = Tensor::from_vec(x.iter().map(|v| v * scale_in).collect(), shape, dtype)?;
        Ok(guided(model, &z, ts[i], cond, guidance.at(step, steps))?.to_vec())
    })?;
    Tensor::from_vec(x, shape, dtype)
}
