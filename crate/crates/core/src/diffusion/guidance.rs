use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    Constant,
    Sampled,
}

/// Classifier-free guidance scale per sampling step. Steps are 1-based;
/// the sampled window `active_steps` is inclusive at both ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSchedule {
    pub mode: GuidanceMode,
    pub scale: f64,
    pub active_steps: (usize, usize),
    pub scale_range: (f64, f64),
}

impl GuidanceSchedule {
    pub fn constant(scale: f64) -> GuidanceSchedule {
        GuidanceSchedule { mode: GuidanceMode::Constant, scale, active_steps: (0, 0), scale_range: (scale, scale) }
    }

    /// Scale rising linearly from 1.1 to 3.6 over steps 5..=30.
    pub fn sampled_default() -> GuidanceSchedule {
        GuidanceSchedule::sampled((5, 30), (1.1, 3.6))
    }

    pub fn sampled(active_steps: (usize, usize), scale_range: (f64, f64)) -> GuidanceSchedule {
        GuidanceSchedule { mode: GuidanceMode::Sampled, scale: 1.0, active_steps, scale_range }
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.mode == GuidanceMode::Sampled {
            let (lo, hi) = self.active_steps;
            if lo > hi || hi > total_steps {
                return Err(Error::Config(format!("guidance window [{lo}, {hi}] does not fit {total_steps} steps")));
            }
            if self.scale_range.0 > self.scale_range.1 {
                return Err(Error::Config("guidance scale range must be increasing".into()));
            }
        }
        Ok(())
    }

    /// Scale used at 1-based `step` of `total_steps`.
    pub fn at(&self, step: usize, _total_steps: usize) -> f64 {
        match self.mode {
            GuidanceMode::Constant => self.scale,
            GuidanceMode::Sampled => {
                let (lo, hi) = self.active_steps;
                let (s_lo, s_hi) = self.scale_range;
                if step < lo || step > hi {
                    1.0
                } else if hi == lo {
                    s_lo
                } else {
                    s_lo + (s_hi - s_lo) * (step - lo) as f64 / (hi - lo) as f64
                }
            }
        }
    }
}

pub fn guidance_at(schedule: &GuidanceSchedule, step: usize, total_steps: usize) -> f64 {
    schedule.at(step, total_steps)
}

/// `uncond + s·(cond − uncond)`, returning the exact operand at `s = 1` and
/// `s = 0`.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, s: f64) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::shape("cfg_combine", format!("{:?} vs {:?}", eps_cond.shape(), eps_uncond.shape())));
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    if s == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let c = eps_cond.values("cfg_combine")?;
    let u = eps_uncond.values("cfg_combine")?;
    let out = c.iter().zip(u).map(|(c, u)| u + s * (c - u)).collect();
    Tensor::from_vec(out, eps_cond.shape(), eps_cond.dtype().promote(eps_uncond.dtype()))
}
