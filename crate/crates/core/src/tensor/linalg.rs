use super::ops::dtype_of;
use super::shape::{broadcast_index, broadcast_shapes, numel};
use super::Tensor;
use crate::error::{Error, Result};

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), c);
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, (k, 1), b, (1, k), c);
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, (1, m), b, (n, 1), c);
}

/// `c += a·b` for strided operands; `c` is dense row-major `[m, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    // SAFETY: the asserts above bound every index reachable through the
    // given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batched matrix product with broadcasting over leading axes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::shape("matmul", format!("need rank >= 2, got {:?} and {:?}", a.shape(), b.shape())));
    }
    let (ra, rb) = (a.rank(), b.rank());
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let ba = &a.shape()[..ra - 2];
    let bb = &b.shape()[..rb - 2];
    let batch = broadcast_shapes(ba, bb)?;
    let nb = numel(&batch);
    let ia = broadcast_index(ba, &batch);
    let ib = broadcast_index(bb, &batch);
    let (av, bv) = (a.values("matmul")?, b.values("matmul")?);
    let mut out = vec![0.0; nb * m * n];
    for bi in 0..nb {
        gemm_nn(
            m,
            k,
            n,
            &av[ia[bi] * m * k..(ia[bi] + 1) * m * k],
            &bv[ib[bi] * k * n..(ib[bi] + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
        );
    }
    let mut shape = batch.clone();
    shape.extend([m, n]);
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        "matmul",
        out,
        shape,
        dtype_of(&[a, b]),
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            let (av, bv) = (pa.data(), pb.data());
            let ga = pa.requires_grad().then(|| {
                let mut ga = vec![0.0; av.len()];
                for bi in 0..nb {
                    gemm_nt(
                        m,
                        n,
                        k,
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bv[ib[bi] * k * n..(ib[bi] + 1) * k * n],
                        &mut ga[ia[bi] * m * k..(ia[bi] + 1) * m * k],
                    );
                }
                ga
            });
            let gb = pb.requires_grad().then(|| {
                let mut gb = vec![0.0; bv.len()];
                for bi in 0..nb {
                    gemm_tn(
                        k,
                        m,
                        n,
                        &av[ia[bi] * m * k..(ia[bi] + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[ib[bi] * k * n..(ib[bi] + 1) * k * n],
                    );
                }
                gb
            });
            vec![ga, gb]
        }),
    ))
}

/// `x · wᵀ + b` over the last axis, with `w` stored as `[out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if w.rank() != 2 {
        return Err(Error::shape("linear", format!("weight must be 2-d, got {:?}", w.shape())));
    }
    let (o, i) = (w.shape()[0], w.shape()[1]);
    if x.shape().last() != Some(&i) {
        return Err(Error::shape("linear", format!("input {:?} vs weight {:?}", x.shape(), w.shape())));
    }
    if let Some(b) = b {
        if b.shape() != [o] {
            return Err(Error::shape("linear", format!("bias {:?} vs out {o}", b.shape())));
        }
    }
    let rows = x.numel() / i;
    let mut out = vec![0.0; rows * o];
    if let Some(b) = b {
        let bv = b.values("linear")?;
        for r in 0..rows {
            out[r * o..(r + 1) * o].copy_from_slice(bv);
        }
    }
    gemm_nt(rows, i, o, x.values("linear")?, w.values("linear")?, &mut out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = o;
    let mut parents = vec![x.clone(), w.clone()];
    let mut refs = vec![x, w];
    if let Some(b) = b {
        parents.push(b.clone());
        refs.push(b);
    }
    let dtype = dtype_of(&refs);
    let (px, pw) = (x.clone(), w.clone());
    let has_bias = b.is_some();
    let bias_grad = b.map(|b| b.requires_grad()).unwrap_or(false);
    Ok(Tensor::from_op(
        "linear",
        out,
        shape,
        dtype,
        parents,
        Box::new(move |g, _| {
            let gx = px.requires_grad().then(|| {
                let mut gx = vec![0.0; rows * i];
                gemm_nn(rows, o, i, g, pw.data(), &mut gx);
                gx
            });
            let gw = pw.requires_grad().then(|| {
                let mut gw = vec![0.0; o * i];
                gemm_tn(o, rows, i, g, px.data(), &mut gw);
                gw
            });
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(bias_grad.then(|| {
                    let mut gb = vec![0.0; o];
                    for r in 0..rows {
                        for (acc, &v) in gb.iter_mut().zip(&g[r * o..(r + 1) * o]) {
                            *acc += v;
                        }
                    }
                    gb
                }));
            }
            res
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loop_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn identity_times_b() {
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let i3 = Tensor::from_vec(eye, &[3, 3], DType::F64).unwrap();
        let b = Tensor::from_vec((0..6).map(|x| x as f64).collect(), &[3, 2], DType::F64).unwrap();
        assert_eq!(matmul(&i3, &b).unwrap().data(), b.data());
    }

    #[test]
    fn random_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[2, 3], 1.0, DType::F64, &mut rng).unwrap();
        let b = Tensor::randn(&[3, 2], 1.0, DType::F64, &mut rng).unwrap();
        let c = matmul(&a, &b).unwrap();
        let want = loop_matmul(a.data(), b.data(), 2, 3, 2);
        for (x, y) in c.data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_shape_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(&[4, 2, 3], 1.0, DType::F64, &mut rng).unwrap();
        let b = Tensor::randn(&[4, 3, 5], 1.0, DType::F64, &mut rng).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().shape(), &[4, 2, 5]);
        let w = Tensor::randn(&[3, 5], 1.0, DType::F64, &mut rng).unwrap();
        let c = matmul(&a, &w).unwrap();
        assert_eq!(c.shape(), &[4, 2, 5]);
        let want = loop_matmul(&a.data()[6..12], w.data(), 2, 3, 5);
        for (x, y) in c.data()[10..20].iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_mismatch_is_error() {
        let a = Tensor::zeros(&[2, 3], DType::F64).unwrap();
        let b = Tensor::zeros(&[2, 3], DType::F64).unwrap();
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_matches_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 3, 4], 1.0, DType::F64, &mut rng).unwrap();
        let w = Tensor::randn(&[5, 4], 1.0, DType::F64, &mut rng).unwrap();
        let b = Tensor::randn(&[5], 1.0, DType::F64, &mut rng).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        let z = matmul(&x, &w.transpose(0, 1).unwrap()).unwrap().add(&b).unwrap();
        for (p, q) in y.data().iter().zip(z.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
