use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
}

impl ScheduleKind {
    pub fn default_beta_start(self) -> f64 {
        match self {
            ScheduleKind::Linear => 1e-4,
            ScheduleKind::ScaledLinear => 8.5e-4,
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "scaled_linear" | "scaled-linear" => Ok(ScheduleKind::ScaledLinear),
            _ => Err(Error::Config(format!("unknown schedule kind `{s}`"))),
        }
    }
}

/// Terminal β for a training resolution: 0.01 at 256 and below, 0.02 above.
pub fn beta_end_for_resolution(resolution: usize) -> f64 {
    if resolution <= 256 {
        0.01
    } else {
        0.02
    }
}

/// Variance schedule over steps `1..=T`; index 0 of each vector is step 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, kind: ScheduleKind, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let frac = |i: usize| if steps == 1 { 1.0 } else { i as f64 / (steps - 1) as f64 };
    let betas: Vec<f64> = (0..steps)
        .map(|i| match kind {
            ScheduleKind::Linear => beta_start + (beta_end - beta_start) * frac(i),
            ScheduleKind::ScaledLinear => {
                let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                (a + (b - a) * frac(i)).powi(2)
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { kind, beta_start, beta_end, betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// ᾱ at step `t`, with ᾱ(0) = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Noise-to-signal ratio `√((1−ᾱ)/ᾱ)` at step `t`.
    pub fn sigma(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ((1.0 - ab) / ab).sqrt()
    }

    /// Forward process `z_t = √ᾱ·z + √(1−ᾱ)·(ε + offset·η)` with one `η`
    /// per (sample, channel), shared over space. `t[i]` is the step of
    /// sample `i`; `offset_noise = 0` draws nothing from `rng`.
    pub fn q_sample<R: Rng + ?Sized>(
        &self,
        z: &Tensor,
        t: &[usize],
        eps: &Tensor,
        offset_noise: f64,
        rng: &mut R,
    ) -> Result<Tensor> {
        if z.shape() != eps.shape() {
            return Err(Error::shape("q_sample", format!("z {:?} vs eps {:?}", z.shape(), eps.shape())));
        }
        let n = z.dim(0);
        if t.len() != n {
            return Err(Error::shape("q_sample", format!("{} timesteps for batch {n}", t.len())));
        }
        if let Some(&bad) = t.iter().find(|&&s| s > self.steps()) {
            return Err(Error::invalid(format!("timestep {bad} outside [0, {}]", self.steps())));
        }
        let dtype = z.dtype();
        let mut shape = vec![1; z.rank()];
        shape[0] = n;
        let a = Tensor::from_vec(t.iter().map(|&s| self.alpha_bar(s).sqrt()).collect(), &shape, dtype)?;
        let b = Tensor::from_vec(t.iter().map(|&s| (1.0 - self.alpha_bar(s)).sqrt()).collect(), &shape, dtype)?;
        let noise = add_offset_noise(eps, offset_noise, rng)?;
        z.mul(&a)?.add(&noise.mul(&b)?)
    }
}

/// `eps + offset·η` with one standard normal `η` per (sample, channel),
/// broadcast over the remaining axes. Draws nothing when `offset` is zero.
pub fn add_offset_noise<R: Rng + ?Sized>(eps: &Tensor, offset: f64, rng: &mut R) -> Result<Tensor> {
    if offset == 0.0 {
        return Ok(eps.clone());
    }
    let n = eps.dim(0);
    let c = if eps.rank() > 1 { eps.dim(1) } else { 1 };
    let mut shape = vec![1; eps.rank()];
    shape[0] = n;
    if eps.rank() > 1 {
        shape[1] = c;
    }
    let eta: Vec<f64> = (0..n * c).map(|_| offset * rng.sample::<f64, _>(StandardNormal)).collect();
    eps.add(&Tensor::from_vec(eta, &shape, eps.dtype())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let s = make_schedule(1, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bars, vec![1.0 - 0.02]);
    }

    #[test]
    fn range_checks() {
        assert!(make_schedule(10, ScheduleKind::Linear, 0.0, 0.02).is_err());
        assert!(make_schedule(10, ScheduleKind::Linear, 0.03, 0.02).is_err());
        assert!(make_schedule(0, ScheduleKind::Linear, 1e-4, 0.02).is_err());
    }
}
