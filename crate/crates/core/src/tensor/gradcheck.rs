use serde::Serialize;

use super::{DType, Tensor};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn new(tol: f64) -> Self {
        GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0, tol, passed: true }
    }

    pub(crate) fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(1.0);
        self.max_abs_err = self.max_abs_err.max(abs);
        if !(rel <= self.max_rel_err) {
            self.max_rel_err = rel;
        }
        self.checked += 1;
    }

    pub(crate) fn finish(mut self) -> Self {
        self.passed = self.max_rel_err <= self.tol;
        self
    }

    pub fn merge(mut self, other: &GradCheckReport) -> Self {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
        self.tol = self.tol.max(other.tol);
        self.passed = self.passed && other.passed;
        self
    }
}

/// Deterministic subset of element indices, evenly spread.
pub(crate) fn probe_indices(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
        _ => (0..n).collect(),
    }
}

/// Compares autodiff against central differences at `point`.
pub fn grad_check(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    point: &Tensor,
    tol: f64,
) -> Result<GradCheckReport> {
    grad_check_many(|xs| f(&xs[0]), std::slice::from_ref(point), None, tol)
}

/// Multi-input variant; `max_per_tensor` limits how many elements of each
/// input are probed.
pub fn grad_check_many(
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
    points: &[Tensor],
    max_per_tensor: Option<usize>,
    tol: f64,
) -> Result<GradCheckReport> {
    if points.iter().any(|p| p.dtype() != DType::F64) {
        return Err(Error::invalid("grad_check runs in double precision"));
    }
    let leaves: Vec<Tensor> = points.iter().map(|p| p.with_requires_grad()).collect();
    let loss = f(&leaves)?;
    loss.backward()?;
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad_data().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();
    let mut report = GradCheckReport::new(tol);
    super::no_grad(|| -> Result<()> {
        for (which, p) in points.iter().enumerate() {
            for idx in probe_indices(p.numel(), max_per_tensor) {
                let eval = |delta: f64| -> Result<f64> {
                    let mut v = p.to_vec();
                    v[idx] += delta;
                    let mut xs = points.to_vec();
                    xs[which] = Tensor::from_vec(v, p.shape(), DType::F64)?;
                    f(&xs)?.item()
                };
                let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
                report.record(grads[which][idx], numeric);
            }
        }
        Ok(())
    })?;
    Ok(report.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, gelu};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[5], 1.0, DType::F64, &mut rng).unwrap();
        let r = grad_check(|x| Ok(x.square().sum()), &x, 1e-8).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn gelu_at_half() {
        let x = Tensor::from_vec(vec![0.5], &[1], DType::F64).unwrap();
        let r = grad_check(|x| Ok(gelu(x).sum()), &x, 1e-6).unwrap();
        assert!(r.max_abs_err < 1e-6, "{r:?}");
    }

    #[test]
    fn conv_gelu_sum_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, 1, 3, 3], 1.0, DType::F64, &mut rng).unwrap();
        let w = Tensor::randn(&[1, 1, 3, 3], 1.0, DType::F64, &mut rng).unwrap();
        let r = grad_check_many(
            |xs| Ok(gelu(&conv2d(&xs[0], &xs[1], None, 1, 1)?).sum()),
            &[x, w],
            None,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn single_precision_rejected() {
        let x = Tensor::zeros(&[2], DType::F32).unwrap();
        assert!(grad_check(|x| Ok(x.sum()), &x, 1e-4).is_err());
    }
}
