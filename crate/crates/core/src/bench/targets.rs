use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::BenchTarget;
use crate::blocks::ForwardCtx;
use crate::classifier::Classifier;
use crate::diffusion::{synthetic_context, Conditioning, NoisePredictor, UNet};
use crate::error::{Error, Result};
use crate::tensor::{no_grad, Tensor};

/// Eval-mode classifier forward on a fixed random batch.
pub struct ClassifierTarget {
    pub model: Classifier,
    pub resolution: (usize, usize),
    pub seed: u64,
    input: Option<Tensor>,
}

impl ClassifierTarget {
    pub fn new(model: Classifier, resolution: (usize, usize), seed: u64) -> ClassifierTarget {
        ClassifierTarget { model, resolution, seed, input: None }
    }
}

impl BenchTarget for ClassifierTarget {
    fn name(&self) -> String {
        self.model.spec.name.clone()
    }

    fn prepare(&mut self, batch: usize) -> Result<()> {
        let dtype = self.model.store().dtype();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let c = self.model.spec.input_channels;
        self.input = Some(Tensor::randn(&[batch, c, self.resolution.0, self.resolution.1], 1.0, dtype, &mut rng)?);
        Ok(())
    }

    fn run_once(&mut self) -> Result<()> {
        let x = self.input.as_ref().ok_or_else(|| Error::invalid("run_once before prepare"))?;
        no_grad(|| self.model.forward(x, &ForwardCtx::eval())).map(|_| ())
    }
}

/// One conditioned noise prediction at a fixed timestep.
pub struct UNetTarget {
    pub model: UNet,
    pub resolution: (usize, usize),
    pub seed: u64,
    input: Option<(Tensor, Vec<f64>, Conditioning)>,
}

impl UNetTarget {
    pub fn new(model: UNet, resolution: (usize, usize), seed: u64) -> UNetTarget {
        UNetTarget { model, resolution, seed, input: None }
    }
}

impl BenchTarget for UNetTarget {
    fn name(&self) -> String {
        self.model.spec.name.clone()
    }

    fn prepare(&mut self, batch: usize) -> Result<()> {
        let dtype = self.model.store().dtype();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let c = self.model.spec.input_channels;
        let z = Tensor::randn(&[batch, c, self.resolution.0, self.resolution.1], 1.0, dtype, &mut rng)?;
        let head = self.model.head();
        let ctx = synthetic_context(batch, head.context_len, head.context_dim, self.seed, dtype)?;
        self.input = Some((z, vec![500.0; batch], Conditioning::Context(ctx)));
        Ok(())
    }

    fn run_once(&mut self) -> Result<()> {
        let (z, t, cond) = self.input.as_ref().ok_or_else(|| Error::invalid("run_once before prepare"))?;
        self.model.predict(z, t, cond).map(|_| ())
    }
}

/// Fixed synthetic workload proportional to `work_per_sample · batch`.
pub struct SpinTarget {
    pub label: String,
    pub work_per_sample: u64,
    /// Extra work in the first `run_once` after `prepare`, as a multiple.
    pub first_call_factor: u64,
    batch: usize,
    calls: u64,
    pub sink: u64,
}

impl SpinTarget {
    pub fn new(label: &str, work_per_sample: u64) -> SpinTarget {
        SpinTarget { label: label.into(), work_per_sample, first_call_factor: 1, batch: 0, calls: 0, sink: 0 }
    }
}

impl BenchTarget for SpinTarget {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn prepare(&mut self, batch: usize) -> Result<()> {
        self.batch = batch;
        self.calls = 0;
        Ok(())
    }

    fn run_once(&mut self) -> Result<()> {
        let factor = if self.calls == 0 { self.first_call_factor } else { 1 };
        self.calls += 1;
        let n = self.work_per_sample * self.batch as u64 * factor;
        let mut x = self.sink | 1;
        for i in 0..n {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(i);
        }
        self.sink = std::hint::black_box(x);
        Ok(())
    }
}
