use std::sync::Arc;

use super::shape::{broadcast_index, broadcast_shapes, numel, reduce_to, split_axis, strides};
use super::{DType, Tensor};
use crate::error::{Error, Result};

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        grads: fn(f64, f64, f64) -> (f64, f64),
    ) -> Result<Tensor> {
        let a = self.values(name)?;
        let b = other.values(name)?;
        let out_shape = broadcast_shapes(self.shape(), other.shape())?;
        let dtype = self.dtype().promote(other.dtype());
        let (ia, ib) = if self.shape() == other.shape() {
            (None, None)
        } else {
            (
                Some(Arc::new(broadcast_index(self.shape(), &out_shape))),
                Some(Arc::new(broadcast_index(other.shape(), &out_shape))),
            )
        };
        let data: Vec<f64> = match (&ia, &ib) {
            (Some(ia), Some(ib)) => ia.iter().zip(ib.iter()).map(|(&i, &j)| f(a[i], b[j])).collect(),
            _ => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        };
        let (pa, pb) = (self.clone(), other.clone());
        let os = out_shape.clone();
        Ok(Tensor::from_op(
            name,
            data,
            out_shape,
            dtype,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let a = pa.data();
                let b = pb.data();
                let n = g.len();
                let mut ga = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for k in 0..n {
                    let (x, y) = match (&ia, &ib) {
                        (Some(ia), Some(ib)) => (a[ia[k]], b[ib[k]]),
                        _ => (a[k], b[k]),
                    };
                    let (da, db) = grads(x, y, g[k]);
                    ga[k] = da;
                    gb[k] = db;
                }
                vec![
                    pa.requires_grad().then(|| reduce_to(&ga, pa.shape(), &os)),
                    pb.requires_grad().then(|| reduce_to(&gb, pb.shape(), &os)),
                ]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |x, y| x / y, |x, y, g| (g / y, -g * x / (y * y)))
    }

    /// Elementwise map with derivative `df(x, y)` expressed through input and output.
    pub(crate) fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        Tensor::from_op(
            name,
            data,
            self.shape().to_vec(),
            self.dtype(),
            vec![self.clone()],
            Box::new(move |g, out| {
                let x = input.data();
                vec![Some(
                    g.iter()
                        .zip(x.iter().zip(out))
                        .map(|(&g, (&x, &y))| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary("add_scalar", |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary("mul_scalar", |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![s],
            vec![1],
            self.dtype(),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sum over one axis. The axis is kept with extent 1 when `keepdim`.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::shape("sum_axis", format!("axis {axis} out of range for {:?}", self.shape())));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.values("sum_axis")?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
        }
        Ok(Tensor::from_op(
            "sum_axis",
            out,
            shape,
            self.dtype(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis} out of range")))?;
        Ok(self.sum_axis(axis, keepdim)?.mul_scalar(1.0 / n as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            "reshape",
            self.data().to_vec(),
            shape.to_vec(),
            self.dtype(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Broadcasts up to `shape`; the gradient is summed back.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        let target = broadcast_shapes(self.shape(), shape)?;
        if target != shape {
            return Err(Error::shape("expand", format!("{:?} does not expand to {shape:?}", self.shape())));
        }
        let idx = broadcast_index(self.shape(), shape);
        let x = self.values("expand")?;
        let data = idx.iter().map(|&i| x[i]).collect();
        let src = self.shape().to_vec();
        let out = shape.to_vec();
        Ok(Tensor::from_op(
            "expand",
            data,
            shape.to_vec(),
            self.dtype(),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(reduce_to(g, &src, &out))]),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("bad permutation {perm:?} for rank {rank}")));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_strides = strides(&in_shape);
        let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.numel();
        // src[k] = flat input offset feeding output element k
        let mut src = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n {
            src.push(off);
            for d in (0..rank).rev() {
                counter[d] += 1;
                off += step[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                off -= step[d] * counter[d];
                counter[d] = 0;
            }
        }
        let x = self.values("permute")?;
        let data = src.iter().map(|&i| x[i]).collect();
        Ok(Tensor::from_op(
            "permute",
            data,
            out_shape,
            self.dtype(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for (k, &i) in src.iter().enumerate() {
                    gx[i] = g[k];
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(Error::shape("transpose", format!("axes ({a},{b}) out of range")));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        let mut dtype = first.dtype();
        for p in parts {
            let ok = p.rank() == rank
                && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", first.shape(), p.shape()),
                ));
            }
            total += p.shape()[axis];
            dtype = dtype.promote(p.dtype());
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.values("concat")?[o * chunk..(o + 1) * chunk]);
            }
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        Ok(Tensor::from_op(
            "concat",
            data,
            shape,
            dtype,
            parts.to_vec(),
            Box::new(move |g, _| {
                let row: usize = sizes.iter().sum();
                let mut out: Vec<Vec<f64>> = sizes.iter().map(|s| Vec::with_capacity(s * outer)).collect();
                for o in 0..outer {
                    let mut start = o * row;
                    for (k, &s) in sizes.iter().enumerate() {
                        out[k].extend_from_slice(&g[start..start + s]);
                        start += s;
                    }
                }
                out.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, self.shape()),
            ));
        }
        let (outer, full, inner) = split_axis(self.shape(), axis);
        let x = self.values("narrow")?;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            "narrow",
            data,
            shape,
            self.dtype(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Gathers along the last axis: `out[.., m] = self[.., index[m]]`.
    pub fn gather_last(&self, index: Arc<Vec<usize>>) -> Result<Tensor> {
        let width = *self.shape().last().expect("rank >= 1");
        if let Some(&bad) = index.iter().find(|&&i| i >= width) {
            return Err(Error::shape("gather_last", format!("index {bad} out of range {width}")));
        }
        if index.is_empty() {
            return Err(Error::shape("gather_last", "empty index"));
        }
        let rows = self.numel() / width;
        let x = self.values("gather_last")?;
        let m = index.len();
        let mut data = Vec::with_capacity(rows * m);
        for r in 0..rows {
            data.extend(index.iter().map(|&i| x[r * width + i]));
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        Ok(Tensor::from_op(
            "gather_last",
            data,
            shape,
            self.dtype(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; rows * width];
                for r in 0..rows {
                    for (k, &i) in index.iter().enumerate() {
                        gx[r * width + i] += g[r * m + k];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn max_abs(&self) -> f64 {
        self.data().iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|x| x.is_finite())
    }
}

pub(crate) fn dtype_of(parts: &[&Tensor]) -> DType {
    parts.iter().fold(DType::F32, |d, t| d.promote(t.dtype()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], s: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), s, DType::F64).unwrap()
    }

    #[test]
    fn permute_matches_index_oracle() {
        let x = t(&(0..24).map(|i| i as f64).collect::<Vec<_>>(), &[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(y.data()[c * 6 + a * 3 + b], x.data()[a * 12 + b * 4 + c]);
                }
            }
        }
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0], &[2, 1]);
        let c = Tensor::concat(&[a.clone(), b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.narrow(1, 0, 2).unwrap().data(), a.data());
    }

    #[test]
    fn broadcast_mul_gradient_reduces() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let s = t(&[2.0], &[1]).with_requires_grad();
        x.mul(&s).unwrap().sum().backward().unwrap();
        assert_eq!(s.grad_data().unwrap(), vec![21.0]);
    }

    #[test]
    fn gather_scatter_gradient() {
        let x = t(&[1.0, 2.0, 3.0], &[1, 3]).with_requires_grad();
        let y = x.gather_last(Arc::new(vec![0, 0, 2])).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 3.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad_data().unwrap(), vec![2.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_axis_keepdim() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert_eq!(x.sum_axis(0, false).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.sum_axis(1, true).unwrap().shape(), &[2, 1]);
    }
}
