//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Values are held as `f64` internally; a [`DType::F32`] tensor rounds every
//! stored value to single precision, so its contents (and checkpoint payload)
//! are exactly what an `f32` engine would hold. Image tensors use the
//! `(N, C, H, W)` layout.
//!
//! Tensors are immutable once produced. The only mutation is gradient
//! accumulation on leaves, guarded by a mutex so models can be shared across
//! sampling threads.

mod conv;
mod gradcheck;
mod linalg;
mod nn;
mod ops;
mod shape;

pub use conv::{avg_pool2d, conv2d, global_avg_pool, upsample_nearest2x};
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use linalg::{linear, matmul};
pub use nn::{
    attention, batch_norm, cross_entropy_soft, gelu, layer_norm, log_softmax, mse_loss, rms_norm,
    rope_2d, sigmoid, silu, softmax, BatchStats,
};
pub use shape::{broadcast_shapes, numel};

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            DType::F32 => x as f32 as f64,
            DType::F64 => x,
        }
    }

    pub fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<DType> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

/// Backward rule: receives the upstream gradient and the forward output,
/// returns one optional gradient per parent (same order as `parents`).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Op {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    meta: bool,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<Op>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any autodiff graph on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(shape={:?}, dtype={}", self.shape(), self.dtype())?;
        if self.is_meta() {
            write!(f, ", meta")?;
        } else if self.numel() <= 8 {
            write!(f, ", data={:?}", self.inner.data)?;
        }
        if self.requires_grad() {
            write!(f, ", requires_grad")?;
        }
        if let Some(op) = &self.inner.op {
            write!(f, ", op={}", op.name)?;
        }
        write!(f, ")")
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape("tensor", format!("zero extent in shape {shape:?}")));
    }
    let n = numel(shape);
    if n != len {
        return Err(Error::shape(
            "tensor",
            format!("shape {shape:?} needs {n} values, got {len}"),
        ));
    }
    Ok(())
}

impl Tensor {
    fn build(
        data: Vec<f64>,
        shape: Vec<usize>,
        dtype: DType,
        meta: bool,
        requires_grad: bool,
        op: Option<Op>,
    ) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                dtype,
                data,
                meta,
                requires_grad,
                grad: Mutex::new(None),
                op,
            }),
        }
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        let data = data.into_iter().map(|x| dtype.round(x)).collect();
        Ok(Self::build(data, shape.to_vec(), dtype, false, false, None))
    }

    pub fn from_f32(data: &[f32], shape: &[usize]) -> Result<Tensor> {
        Self::from_vec(data.iter().map(|&x| x as f64).collect(), shape, DType::F32)
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Result<Tensor> {
        Self::from_vec(vec![value; numel(shape)], shape, dtype)
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Result<Tensor> {
        Self::full(shape, 0.0, dtype)
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Result<Tensor> {
        Self::full(shape, 1.0, dtype)
    }

    pub fn scalar(value: f64, dtype: DType) -> Tensor {
        Self::build(vec![dtype.round(value)], vec![1], dtype, false, false, None)
    }

    /// Standard-normal draws scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, dtype: DType, rng: &mut R) -> Result<Tensor> {
        let data = (0..numel(shape))
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::from_vec(data, shape, dtype)
    }

    /// Shape-only tensor used to count parameters without allocating them.
    pub fn meta(shape: &[usize], dtype: DType) -> Result<Tensor> {
        check_shape(shape, numel(shape))?;
        Ok(Self::build(Vec::new(), shape.to_vec(), dtype, true, false, None))
    }

    /// Records a new node. The backward rule is kept only when grad mode is on
    /// and at least one parent requires a gradient.
    pub(crate) fn from_op(
        name: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        dtype: DType,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len(), "op {name} produced wrong length");
        let data: Vec<f64> = match dtype {
            DType::F64 => data,
            DType::F32 => data.into_iter().map(|x| x as f32 as f64).collect(),
        };
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let op = track.then(|| Op {
            name,
            parents,
            backward,
        });
        Self::build(data, shape, dtype, false, track, op)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.inner.shape[axis]
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    pub fn is_meta(&self) -> bool {
        self.inner.meta
    }

    /// Raw row-major values. Empty for meta tensors.
    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub(crate) fn values(&self, op: &'static str) -> Result<&[f64]> {
        if self.inner.meta {
            Err(Error::Meta(op))
        } else {
            Ok(&self.inner.data)
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.inner.data.iter().map(|&x| x as f32).collect()
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 || self.is_meta() {
            return Err(Error::shape("item", format!("expected one element, shape {:?}", self.shape())));
        }
        Ok(self.inner.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    /// Fresh leaf holding the same values, flagged to receive gradients.
    pub fn with_requires_grad(&self) -> Tensor {
        Self::build(
            self.inner.data.clone(),
            self.inner.shape.clone(),
            self.inner.dtype,
            self.inner.meta,
            true,
            None,
        )
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(
            self.inner.data.clone(),
            self.inner.shape.clone(),
            self.inner.dtype,
            self.inner.meta,
            false,
            None,
        )
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        let data = self.inner.data.iter().map(|&x| dtype.round(x)).collect();
        Self::build(data, self.inner.shape.clone(), dtype, self.inner.meta, false, None)
    }

    pub fn grad(&self) -> Option<Tensor> {
        let g = self.inner.grad.lock().expect("grad lock");
        g.as_ref().map(|g| {
            Self::build(g.clone(), self.inner.shape.clone(), self.inner.dtype, false, false, None)
        })
    }

    pub fn grad_data(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.lock().expect("grad lock");
        let dtype = self.inner.dtype;
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a = dtype.round(*a + b);
                }
            }
            None => *slot = Some(g.iter().map(|&x| dtype.round(x)).collect()),
        }
    }

    /// Reverse-mode sweep from a scalar. Leaves accumulate into their grad
    /// slot, so calling twice doubles the gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.inner.op {
                None => node.accumulate_grad(&g),
                Some(op) => {
                    let parent_grads = (op.backward)(&g, &node.inner.data);
                    debug_assert_eq!(parent_grads.len(), op.parents.len(), "op {}", op.name);
                    for (parent, pg) in op.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel(), "grad length from op {}", op.name);
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&pg) {
                                    *a += b;
                                }
                            }
                            None => {
                                grads.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the nodes that require gradients (parents first).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = &node.inner.op {
                for p in &op.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_rounds_storage() {
        let t = Tensor::from_vec(vec![0.1], &[1], DType::F32).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
        let t = Tensor::from_vec(vec![0.1], &[1], DType::F64).unwrap();
        assert_eq!(t.data()[0], 0.1);
    }

    #[test]
    fn rejects_zero_extent_and_bad_length() {
        assert!(Tensor::from_vec(vec![], &[0, 3], DType::F32).is_err());
        assert!(Tensor::from_vec(vec![1.0; 5], &[2, 3], DType::F32).is_err());
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let x = Tensor::ones(&[2], DType::F64).unwrap().with_requires_grad();
        let y = x.mul_scalar(2.0);
        assert!(matches!(y.backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn grad_of_weighted_sum_is_input() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.5], &[3], DType::F64).unwrap();
        let w = Tensor::from_vec(vec![0.3, 0.2, 0.1], &[3], DType::F64).unwrap().with_requires_grad();
        let loss = w.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(w.grad_data().unwrap(), x.to_vec());
    }

    #[test]
    fn two_backward_calls_double_the_gradient() {
        let w = Tensor::from_vec(vec![0.5, 1.5], &[2], DType::F64).unwrap().with_requires_grad();
        let loss = w.mul(&w).unwrap().sum();
        loss.backward().unwrap();
        let once = w.grad_data().unwrap();
        loss.backward().unwrap();
        let twice = w.grad_data().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
        w.zero_grad();
        assert!(w.grad_data().is_none());
    }

    #[test]
    fn no_grad_skips_recording() {
        let w = Tensor::ones(&[2], DType::F64).unwrap().with_requires_grad();
        let y = no_grad(|| w.mul_scalar(3.0));
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum((w*w) + (w*w)) reuses one node twice
        let w = Tensor::from_vec(vec![2.0], &[1], DType::F64).unwrap().with_requires_grad();
        let sq = w.mul(&w).unwrap();
        let loss = sq.add(&sq).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(w.grad_data().unwrap(), vec![8.0]);
    }
}
