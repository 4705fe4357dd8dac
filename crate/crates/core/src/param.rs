//! Named parameters, the model registry and a scoped builder.

use std::collections::HashSet;
use std::sync::{Arc, Mutex, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{grad_check_many, numel, DType, GradCheckReport, Tensor};

struct ParamInner {
    name: String,
    trainable: bool,
    value: RwLock<Tensor>,
}

/// A named tensor slot. Trainable parameters always hold a gradient-tracking
/// leaf; buffers (running statistics) never do.
#[derive(Clone)]
pub struct Param(Arc<ParamInner>);

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.name(), self.shape())
    }
}

impl Param {
    fn new(name: String, value: Tensor, trainable: bool) -> Param {
        let value = if trainable && !value.is_meta() { value.with_requires_grad() } else { value };
        Param(Arc::new(ParamInner { name, trainable, value: RwLock::new(value) }))
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn trainable(&self) -> bool {
        self.0.trainable
    }

    pub fn value(&self) -> Tensor {
        self.0.value.read().expect("param lock").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn dtype(&self) -> DType {
        self.value().dtype()
    }

    /// Replaces the stored values, keeping shape and dtype.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let cur = self.value();
        if data.len() != cur.numel() {
            return Err(Error::shape("Param::set_data", format!("{} values for {:?}", data.len(), cur.shape())));
        }
        let t = Tensor::from_vec(data, cur.shape(), cur.dtype())?;
        *self.0.value.write().expect("param lock") = if self.0.trainable { t.with_requires_grad() } else { t };
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.value().grad_data()
    }

    pub fn zero_grad(&self) {
        self.value().zero_grad();
    }
}

#[derive(Default)]
struct StoreInner {
    params: Vec<Param>,
    buffers: Vec<Param>,
    names: HashSet<String>,
}

/// Ordered registry of every parameter and buffer of one model.
#[derive(Clone, Default)]
pub struct ParamStore(Arc<Mutex<StoreInner>>);

impl ParamStore {
    fn insert(&self, p: Param) -> Result<Param> {
        let mut s = self.0.lock().expect("store lock");
        if !s.names.insert(p.name().to_string()) {
            return Err(Error::invalid(format!("duplicate parameter name `{}`", p.name())));
        }
        if p.trainable() {
            s.params.push(p.clone());
        } else {
            s.buffers.push(p.clone());
        }
        Ok(p)
    }

    /// Trainable parameters in creation order.
    pub fn params(&self) -> Vec<Param> {
        self.0.lock().expect("store lock").params.clone()
    }

    pub fn buffers(&self) -> Vec<Param> {
        self.0.lock().expect("store lock").buffers.clone()
    }

    /// Parameters followed by buffers.
    pub fn all(&self) -> Vec<Param> {
        let s = self.0.lock().expect("store lock");
        s.params.iter().chain(&s.buffers).cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Param> {
        self.all().into_iter().find(|p| p.name() == name)
    }

    /// Scalar count of trainable parameters.
    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Dtype of the first parameter; F32 for an empty store.
    pub fn dtype(&self) -> DType {
        self.params().first().map_or(DType::F32, |p| p.dtype())
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    /// Normal with std `sqrt(2 / fan_out)`, fan_out = `out · k · k`.
    ConvFanOut,
}

impl Init {
    fn sample(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = numel(shape);
        let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => (0..n).map(|_| std * normal(rng)).collect(),
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z = normal(rng);
                    if z.abs() <= 2.0 {
                        break std * z;
                    }
                })
                .collect(),
            Init::ConvFanOut => {
                let fan_out = shape[0] * shape[2..].iter().product::<usize>();
                let std = (2.0 / fan_out as f64).sqrt();
                (0..n).map(|_| std * normal(rng)).collect()
            }
        }
    }
}

/// Creates parameters under a dotted path prefix, drawing initial values
/// from one seeded stream in creation order. In meta mode only shapes are
/// recorded.
#[derive(Clone)]
pub struct Builder {
    store: ParamStore,
    prefix: String,
    rng: Arc<Mutex<ChaCha8Rng>>,
    dtype: DType,
    meta: bool,
}

impl Builder {
    pub fn new(seed: u64, dtype: DType) -> Builder {
        Builder {
            store: ParamStore::default(),
            prefix: String::new(),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
            dtype,
            meta: false,
        }
    }

    pub fn meta(dtype: DType) -> Builder {
        Builder { meta: true, ..Builder::new(0, dtype) }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Builder {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Builder { prefix, ..self.clone() }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn is_meta(&self) -> bool {
        self.meta
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn make(&self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Param> {
        let value = if self.meta {
            Tensor::meta(shape, self.dtype)?
        } else {
            let data = init.sample(shape, &mut self.rng.lock().expect("rng lock"));
            Tensor::from_vec(data, shape, self.dtype)?
        };
        self.store.insert(Param::new(self.path(name), value, trainable))
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Param> {
        self.make(name, shape, init, true)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Param> {
        self.make(name, shape, init, false)
    }
}

/// Finite-difference check of `f` with respect to registered parameters,
/// probing at most `max_per_tensor` elements of each.
pub fn grad_check_params(
    f: impl Fn() -> Result<Tensor>,
    params: &[Param],
    max_per_tensor: Option<usize>,
    tol: f64,
) -> Result<GradCheckReport> {
    let originals: Vec<Tensor> = params.iter().map(|p| p.value()).collect();
    let restore = || -> Result<()> {
        for (p, o) in params.iter().zip(&originals) {
            p.set_data(o.to_vec())?;
        }
        Ok(())
    };
    let report = grad_check_many(
        |xs| {
            // the checker hands us either fresh leaves (analytic pass) or
            // perturbed copies (numeric pass); both are installed in place
            for (p, x) in params.iter().zip(xs) {
                *p.0.value.write().expect("param lock") = x.clone();
            }
            f()
        },
        &originals.iter().map(|o| o.detach()).collect::<Vec<_>>(),
        max_per_tensor,
        tol,
    );
    restore()?;
    report
}

/// Sum of squares of every gradient, as a scalar.
pub fn global_grad_norm(params: &[Param]) -> f64 {
    params
        .iter()
        .filter_map(|p| p.grad())
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_scoped_and_unique() {
        let b = Builder::new(0, DType::F64);
        let s = b.pp("stage0").pp("block1");
        let p = s.param("weight", &[2, 2], Init::Ones).unwrap();
        assert_eq!(p.name(), "stage0.block1.weight");
        assert!(s.param("weight", &[2, 2], Init::Ones).is_err());
    }

    #[test]
    fn same_seed_same_values() {
        let make = || {
            let b = Builder::new(11, DType::F32);
            b.param("w", &[4, 3, 3, 3], Init::ConvFanOut).unwrap().value().to_vec()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let b = Builder::new(1, DType::F64);
        let p = b.param("w", &[1000], Init::TruncNormal(0.02)).unwrap();
        assert!(p.value().data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn meta_builder_counts_without_data() {
        let b = Builder::meta(DType::F32);
        b.param("w", &[1000, 1000], Init::ConvFanOut).unwrap();
        b.buffer("m", &[7], Init::Zeros).unwrap();
        assert_eq!(b.store().num_params(), 1_000_000);
        assert!(b.store().params()[0].value().is_meta());
    }

    #[test]
    fn param_grad_check() {
        let b = Builder::new(3, DType::F64);
        let w = b.param("w", &[3], Init::Normal(1.0)).unwrap();
        let x = Tensor::from_vec(vec![0.5, -1.0, 2.0], &[3], DType::F64).unwrap();
        let before = w.value().to_vec();
        let r = grad_check_params(|| Ok(w.value().mul(&x)?.square().sum()), &[w.clone()], None, 1e-7).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(w.value().to_vec(), before);
        assert!(w.value().requires_grad());
    }
}
