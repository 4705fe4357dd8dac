//! AdamW, global-norm clipping and parameter EMA.

use crate::error::{Error, Result};
use crate::param::Param;

/// Gradients of `params`, zeros where a parameter received none.
pub fn collect_grads(params: &[Param]) -> Vec<Vec<f64>> {
    params.iter().map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()])).collect()
}

pub fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Param], beta1: f64, beta2: f64, weight_decay: f64) -> AdamW {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect::<Vec<_>>();
        AdamW { beta1, beta2, eps: 1e-8, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with decoupled weight decay:
    /// `p ← p·(1−lr·wd) − lr·m̂/(√v̂+eps)`.
    pub fn step(&mut self, params: &[Param], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::invalid("AdamW: parameter list changed between steps"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter().enumerate() {
            let g = &grads[i];
            let mut w = p.value().to_vec();
            if g.len() != w.len() {
                return Err(Error::shape("AdamW", format!("gradient for `{}` has {} values", p.name(), g.len())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..w.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] = w[j] * (1.0 - lr * self.weight_decay) - lr * mh / (vh.sqrt() + self.eps);
            }
            p.set_data(w)?;
        }
        Ok(())
    }
}

/// Exponential moving average of parameter values.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f64,
    shadow: Vec<Vec<f64>>,
}

impl Ema {
    pub fn new(params: &[Param], decay: f64) -> Result<Ema> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::invalid(format!("EMA decay must lie in [0, 1), got {decay}")));
        }
        Ok(Ema { decay, shadow: params.iter().map(|p| p.value().to_vec()).collect() })
    }

    pub fn update(&mut self, params: &[Param]) {
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            let v = p.value();
            for (a, b) in s.iter_mut().zip(v.data()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
    }

    pub fn shadow(&self) -> &[Vec<f64>] {
        &self.shadow
    }

    /// Runs `f` with the averaged weights installed, then restores.
    pub fn with_weights<R>(&self, params: &[Param], f: impl FnOnce() -> R) -> Result<R> {
        let saved: Vec<Vec<f64>> = params.iter().map(|p| p.value().to_vec()).collect();
        for (p, s) in params.iter().zip(&self.shadow) {
            p.set_data(s.clone())?;
        }
        let out = f();
        for (p, s) in params.iter().zip(saved) {
            p.set_data(s)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Builder, Init};
    use crate::DType;

    #[test]
    fn clip_bounds_norm() {
        let mut g = vec![vec![3.0, 4.0], vec![12.0]];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 13.0).abs() < 1e-12);
        assert!(grad_norm(&g) <= 1.0 + 1e-9);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let b = Builder::new(0, DType::F64);
        let p = b.param("w", &[3], Init::Const(1.0)).unwrap();
        let mut opt = AdamW::new(std::slice::from_ref(&p), 0.9, 0.999, 0.0);
        opt.step(std::slice::from_ref(&p), &[vec![0.5, -2.0, 1e-3]], 0.1).unwrap();
        let w = p.value().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
    }
}
