use super::linalg::matmul;
use super::shape::split_axis;
use super::Tensor;
use crate::error::{Error, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GeLU, `x·Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.unary(
        "gelu",
        |x| 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
        |x, _| {
            let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
            cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
        },
    )
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.unary("sigmoid", sigmoid_f, |_, y| y * (1.0 - y))
}

pub fn silu(x: &Tensor) -> Tensor {
    x.unary(
        "silu",
        |x| x * sigmoid_f(x),
        |x, _| {
            let s = sigmoid_f(x);
            s * (1.0 + x * (1.0 - s))
        },
    )
}

fn check_axis(x: &Tensor, axis: usize, op: &'static str) -> Result<()> {
    if axis >= x.rank() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {:?}", x.shape())));
    }
    Ok(())
}

/// Softmax along `axis`, stabilised by subtracting the slice maximum.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(x, axis, "softmax")?;
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let xv = x.values("softmax")?;
    let mut out = vec![0.0; xv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let m = (0..len).map(|a| xv[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for a in 0..len {
                let e = (xv[at(a)] - m).exp();
                out[at(a)] = e;
                s += e;
            }
            for a in 0..len {
                out[at(a)] /= s;
            }
        }
    }
    Ok(Tensor::from_op(
        "softmax",
        out,
        x.shape().to_vec(),
        x.dtype(),
        vec![x.clone()],
        Box::new(move |g, y| {
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                    for a in 0..len {
                        gx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

pub fn log_softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(x, axis, "log_softmax")?;
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let xv = x.values("log_softmax")?;
    let mut out = vec![0.0; xv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let m = (0..len).map(|a| xv[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..len).map(|a| (xv[at(a)] - m).exp()).sum::<f64>().ln();
            for a in 0..len {
                out[at(a)] = xv[at(a)] - lse;
            }
        }
    }
    Ok(Tensor::from_op(
        "log_softmax",
        out,
        x.shape().to_vec(),
        x.dtype(),
        vec![x.clone()],
        Box::new(move |g, y| {
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let gs: f64 = (0..len).map(|a| g[at(a)]).sum();
                    for a in 0..len {
                        gx[at(a)] = g[at(a)] - y[at(a)].exp() * gs;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

fn check_eps(eps: f64, op: &'static str) -> Result<()> {
    if eps.is_finite() && eps > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{op}: eps must be > 0, got {eps}")))
    }
}

/// Normalises each slice along the last axis to zero mean (when `center`)
/// and unit variance / unit RMS.
fn normalize_last(x: &Tensor, eps: f64, center: bool) -> Result<Tensor> {
    let d = *x.shape().last().expect("rank >= 1");
    let rows = x.numel() / d;
    let xv = x.values("normalize")?;
    let mut out = vec![0.0; xv.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let s = &xv[r * d..(r + 1) * d];
        let mu = if center { s.iter().sum::<f64>() / d as f64 } else { 0.0 };
        let var = s.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let iv = 1.0 / (var + eps).sqrt();
        inv[r] = iv;
        for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(s) {
            *o = (v - mu) * iv;
        }
    }
    let name = if center { "layer_norm" } else { "rms_norm" };
    Ok(Tensor::from_op(
        name,
        out,
        x.shape().to_vec(),
        x.dtype(),
        vec![x.clone()],
        Box::new(move |g, y| {
            let mut gx = vec![0.0; y.len()];
            let n = d as f64;
            for r in 0..rows {
                let gs = &g[r * d..(r + 1) * d];
                let ys = &y[r * d..(r + 1) * d];
                let gy: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n;
                let gm = if center { gs.iter().sum::<f64>() / n } else { 0.0 };
                for k in 0..d {
                    gx[r * d + k] = inv[r] * (gs[k] - gm - ys[k] * gy);
                }
            }
            vec![Some(gx)]
        }),
    ))
}

fn affine(x: Tensor, gain: Option<&Tensor>, shift: Option<&Tensor>) -> Result<Tensor> {
    let x = match gain {
        Some(g) => x.mul(g)?,
        None => x,
    };
    match shift {
        Some(b) => x.add(b),
        None => Ok(x),
    }
}

/// Layer normalisation over the last axis.
pub fn layer_norm(x: &Tensor, gain: Option<&Tensor>, shift: Option<&Tensor>, eps: f64) -> Result<Tensor> {
    check_eps(eps, "layer_norm")?;
    affine(normalize_last(x, eps, true)?, gain, shift)
}

/// RMS normalisation over the last axis.
pub fn rms_norm(x: &Tensor, gain: Option<&Tensor>, eps: f64) -> Result<Tensor> {
    check_eps(eps, "rms_norm")?;
    affine(normalize_last(x, eps, false)?, gain, None)
}

/// Per-channel batch statistics (biased variance) of a training forward.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Batch normalisation of `(N, C, H, W)` over `(N, H, W)`.
///
/// With `running = Some((mean, var))` the running statistics are used (eval
/// mode); otherwise batch statistics are used and returned so the caller can
/// update its running buffers.
pub fn batch_norm(
    x: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
    running: Option<(&[f64], &[f64])>,
    eps: f64,
) -> Result<(Tensor, Option<BatchStats>)> {
    check_eps(eps, "batch_norm")?;
    if x.rank() != 4 {
        return Err(Error::shape("batch_norm", format!("need 4-d input, got {:?}", x.shape())));
    }
    let [n, c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    if gain.shape() != [c] || shift.shape() != [c] {
        return Err(Error::shape("batch_norm", format!("affine params must be [{c}]")));
    }
    let hw = h * w;
    let xv = x.values("batch_norm")?;
    let view = |t: &Tensor| t.reshape(&[1, c, 1, 1]);
    let (normed, stats) = match running {
        Some((mean, var)) => {
            if mean.len() != c || var.len() != c {
                return Err(Error::shape("batch_norm", "running stats length mismatch"));
            }
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut out = vec![0.0; xv.len()];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    for k in base..base + hw {
                        out[k] = (xv[k] - mean[ch]) * inv[ch];
                    }
                }
            }
            let t = Tensor::from_op(
                "batch_norm_eval",
                out,
                x.shape().to_vec(),
                x.dtype(),
                vec![x.clone()],
                Box::new(move |g, _| {
                    let mut gx = g.to_vec();
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for v in &mut gx[base..base + hw] {
                                *v *= inv[ch];
                            }
                        }
                    }
                    vec![Some(gx)]
                }),
            );
            (t, None)
        }
        None => {
            if n == 1 {
                log::warn!("batch_norm in training mode with batch size 1; statistics come from a single sample");
            }
            let m = (n * hw) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    mean[ch] += xv[base..base + hw].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    var[ch] += xv[base..base + hw].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut out = vec![0.0; xv.len()];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    for k in base..base + hw {
                        out[k] = (xv[k] - mean[ch]) * inv[ch];
                    }
                }
            }
            let inv_b = inv.clone();
            let t = Tensor::from_op(
                "batch_norm_train",
                out,
                x.shape().to_vec(),
                x.dtype(),
                vec![x.clone()],
                Box::new(move |g, y| {
                    let mut gm = vec![0.0; c];
                    let mut gy = vec![0.0; c];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for k in base..base + hw {
                                gm[ch] += g[k];
                                gy[ch] += g[k] * y[k];
                            }
                        }
                    }
                    let mut gx = vec![0.0; y.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for k in base..base + hw {
                                gx[k] = inv_b[ch] * (g[k] - gm[ch] / m - y[k] * gy[ch] / m);
                            }
                        }
                    }
                    vec![Some(gx)]
                }),
            );
            (t, Some(BatchStats { mean, var, count: n * hw }))
        }
    };
    let out = normed.mul(&view(gain)?)?.add(&view(shift)?)?;
    Ok((out, stats))
}

/// Angle table for 2-d axial rotary embeddings: the first half of the head
/// dimension rotates with the row index, the second half with the column.
fn rope_angles(positions: &[(usize, usize)], dh: usize, base: f64) -> Vec<(f64, f64)> {
    let quarter = dh / 4;
    let mut table = Vec::with_capacity(positions.len() * dh / 2);
    for &(r, c) in positions {
        for (axis_pos, _) in [(r, 0), (c, 1)] {
            for i in 0..quarter {
                let theta = base.powf(-(i as f64) / quarter as f64);
                let a = axis_pos as f64 * theta;
                table.push((a.cos(), a.sin()));
            }
        }
    }
    table
}

/// Applies 2-d axial RoPE to `x` of shape `[..., L, dh]` where
/// `positions[l] = (row, col)`.
pub fn rope_2d(x: &Tensor, positions: &[(usize, usize)], base: f64) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::shape("rope_2d", format!("need [..., L, dh], got {:?}", x.shape())));
    }
    let dh = x.dim(x.rank() - 1);
    let l = x.dim(x.rank() - 2);
    if dh % 4 != 0 {
        return Err(Error::shape("rope_2d", format!("head dim {dh} is not divisible by 4")));
    }
    if positions.len() != l {
        return Err(Error::shape("rope_2d", format!("{} positions for {l} tokens", positions.len())));
    }
    let table = rope_angles(positions, dh, base);
    let half = dh / 2;
    let rotate = move |src: &[f64], dir: f64| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        let rows = src.len() / dh;
        for row in 0..rows {
            let tok = row % l;
            let off = row * dh;
            for p in 0..half {
                let (cos, sin) = table[tok * half + p];
                let sin = dir * sin;
                let (a, b) = (src[off + 2 * p], src[off + 2 * p + 1]);
                out[off + 2 * p] = a * cos - b * sin;
                out[off + 2 * p + 1] = a * sin + b * cos;
            }
        }
        out
    };
    let data = rotate(x.values("rope_2d")?, 1.0);
    Ok(Tensor::from_op(
        "rope_2d",
        data,
        x.shape().to_vec(),
        x.dtype(),
        vec![x.clone()],
        Box::new(move |g, _| vec![Some(rotate(g, -1.0))]),
    ))
}

/// Scaled dot-product attention on `[N, h, L, dh]` queries and `[N, h, S, dh]`
/// keys/values. `bias` broadcasts against the `[N, h, L, S]` logits.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let dh = *q.shape().last().expect("rank >= 1");
    if k.shape().last() != Some(&dh) {
        return Err(Error::shape("attention", format!("q {:?} vs k {:?}", q.shape(), k.shape())));
    }
    let kt = k.transpose(k.rank() - 2, k.rank() - 1)?;
    let mut logits = matmul(q, &kt)?.mul_scalar(1.0 / (dh as f64).sqrt());
    if let Some(b) = bias {
        logits = logits.add(b)?;
    }
    let p = softmax(&logits, logits.rank() - 1)?;
    matmul(&p, v)
}

/// Cross-entropy against soft target rows, averaged over the batch.
pub fn cross_entropy_soft(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.shape() != targets.shape() || logits.rank() != 2 {
        return Err(Error::shape(
            "cross_entropy_soft",
            format!("logits {:?} vs targets {:?}", logits.shape(), targets.shape()),
        ));
    }
    let n = logits.dim(0) as f64;
    Ok(log_softmax(logits, 1)?.mul(targets)?.sum().mul_scalar(-1.0 / n))
}

pub fn mse_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse_loss", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.sub(b)?.square().mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64], s: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), s, DType::F64).unwrap()
    }

    #[test]
    fn gelu_values() {
        let y = gelu(&t(&[0.0, 10.0, -10.0], &[3]));
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        assert!(y.data()[2].abs() < 1e-6);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let y = softmax(&t(&[0.3; 4], &[4]), 0).unwrap();
        for v in y.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let y = softmax(&t(&[1000.0, 0.0], &[2]), 0).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_nan_propagates() {
        let y = softmax(&t(&[f64::NAN, 1.0], &[2]), 0).unwrap();
        assert!(y.data().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn softmax_rows_sum_to_one_on_axis0() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 5], 2.0, DType::F32, &mut rng).unwrap();
        let y = softmax(&x, 0).unwrap();
        for col in 0..5 {
            let s: f64 = (0..3).map(|r| y.data()[r * 5 + col]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_is_zero() {
        let y = layer_norm(&t(&[2.5; 6], &[6]), None, None, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rms_norm_of_three_four() {
        let y = rms_norm(&t(&[3.0, 4.0], &[2]), Some(&t(&[1.0, 1.0], &[2])), 1e-12).unwrap();
        let s = 2f64.sqrt() / 5.0;
        assert!((y.data()[0] - 3.0 * s).abs() < 1e-9);
        assert!((y.data()[1] - 4.0 * s).abs() < 1e-9);
    }

    #[test]
    fn eps_must_be_positive() {
        let x = t(&[1.0, 2.0], &[2]);
        assert!(layer_norm(&x, None, None, 0.0).is_err());
        assert!(rms_norm(&x, None, -1.0).is_err());
    }

    #[test]
    fn batch_norm_eval_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 3, 2, 2], 1.0, DType::F64, &mut rng).unwrap();
        let g = t(&[1.5, -0.5, 2.0], &[3]);
        let b = t(&[0.1, 0.2, -0.3], &[3]);
        let mean = [0.3, -0.2, 0.05];
        let var = [1.2, 0.7, 2.5];
        let eps = 1e-5;
        let (y, stats) = batch_norm(&x, &g, &b, Some((&mean, &var)), eps).unwrap();
        assert!(stats.is_none());
        for (k, (&xv, &yv)) in x.data().iter().zip(y.data()).enumerate() {
            let c = (k / 4) % 3;
            let want = (xv - mean[c]) / (var[c] + eps).sqrt() * g.data()[c] + b.data()[c];
            assert!((yv - want).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[4, 2, 3, 3], 3.0, DType::F64, &mut rng).unwrap();
        let (y, stats) = batch_norm(&x, &t(&[1.0, 1.0], &[2]), &t(&[0.0, 0.0], &[2]), None, 1e-5).unwrap();
        assert_eq!(stats.unwrap().count, 36);
        for c in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|n| (0..9).map(move |k| (n * 2 + c) * 9 + k)).map(|i| y.data()[i]).collect();
            let m: f64 = vals.iter().sum::<f64>() / 36.0;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn rope_identity_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::randn(&[1, 8], 1.0, DType::F64, &mut rng).unwrap();
        let r = rope_2d(&q, &[(0, 0)], 10_000.0).unwrap();
        assert_eq!(r.data(), q.data());
        assert!(rope_2d(&Tensor::zeros(&[1, 6], DType::F64).unwrap(), &[(0, 0)], 10_000.0).is_err());
    }
}
