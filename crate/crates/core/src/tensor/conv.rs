use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::ops::dtype_of;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    /// Unfolds one sample into columns `off..off+hw` of a `[Cin·K², ld]` matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64], ld: usize, off: usize) {
        let kk = self.k * self.k;
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * kk + ky * self.k + kx) * ld + off;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            cols[row + oy * self.wo + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                x[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], ld: usize, off: usize, gx: &mut [f64]) {
        let kk = self.k * self.k;
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * kk + ky * self.k + kx) * ld + off;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            gx[(c * self.h + iy as usize) * self.w + ix as usize] += cols[row + oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Samples per im2col batch, keeping the column buffer near 4M values.
fn chunk_samples(n: usize, per_sample: usize) -> usize {
    (CHUNK_VALUES / per_sample.max(1)).clamp(1, n.max(1))
}

const CHUNK_VALUES: usize = 1 << 22;

/// 2-d cross-correlation on `(N, Cin, H, W)` with square kernels.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if input.rank() != 4 || weight.rank() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("expected 4-d input and weight, got {:?} and {:?}", input.shape(), weight.shape()),
        ));
    }
    let [n, cin, h, w] = [input.dim(0), input.dim(1), input.dim(2), input.dim(3)];
    let [cout, wcin, k, k2] = [weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3)];
    if k != k2 || !(k == 1 || k == 3) {
        return Err(Error::shape("conv2d", format!("kernel must be 1x1 or 3x3, got {k}x{k2}")));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::shape("conv2d", format!("stride must be 1 or 2, got {stride}")));
    }
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels but weight expects {wcin}"),
        ));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::shape(
            "conv2d",
            format!("input {h}x{w} with padding {padding} is smaller than kernel {k}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d", format!("bias {:?} vs {cout} output channels", b.shape())));
        }
    }
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let g = Geom { cin, h, w, k, stride, pad: padding, ho, wo };
    let ckk = cin * k * k;
    let hw = ho * wo;
    let x = input.values("conv2d")?;
    let wv = weight.values("conv2d")?;
    let chw = cin * h * w;
    let chunk = chunk_samples(n, ckk * hw);
    let mut out = vec![0.0; n * cout * hw];
    let bv = bias.map(|b| b.values("conv2d")).transpose()?;
    for s0 in (0..n).step_by(chunk) {
        let sn = chunk.min(n - s0);
        let ld = sn * hw;
        let mut cols = vec![0.0; ckk * ld];
        for s in 0..sn {
            g.im2col(&x[(s0 + s) * chw..(s0 + s + 1) * chw], &mut cols, ld, s * hw);
        }
        let mut tmp = vec![0.0; cout * ld];
        gemm_nn(cout, ckk, ld, wv, &cols, &mut tmp);
        for s in 0..sn {
            for c in 0..cout {
                let b = bv.map_or(0.0, |b| b[c]);
                let dst = &mut out[((s0 + s) * cout + c) * hw..((s0 + s) * cout + c + 1) * hw];
                for (d, v) in dst.iter_mut().zip(&tmp[c * ld + s * hw..c * ld + (s + 1) * hw]) {
                    *d = v + b;
                }
            }
        }
    }
    let mut parents = vec![input.clone(), weight.clone()];
    let mut refs = vec![input, weight];
    if let Some(b) = bias {
        parents.push(b.clone());
        refs.push(b);
    }
    let dtype = dtype_of(&refs);
    let (px, pw) = (input.clone(), weight.clone());
    let bias_slot = bias.map(|b| b.requires_grad());
    Ok(Tensor::from_op(
        "conv2d",
        out,
        vec![n, cout, ho, wo],
        dtype,
        parents,
        Box::new(move |gout, _| {
            let x = px.data();
            let wv = pw.data();
            let need_x = px.requires_grad();
            let need_w = pw.requires_grad();
            let mut gx = need_x.then(|| vec![0.0; x.len()]);
            let mut gw = need_w.then(|| vec![0.0; wv.len()]);
            let chw = cin * h * w;
            let chunk = chunk_samples(n, ckk * hw);
            for s0 in (0..n).step_by(chunk) {
                let sn = chunk.min(n - s0);
                let ld = sn * hw;
                let mut gtmp = vec![0.0; cout * ld];
                for s in 0..sn {
                    for c in 0..cout {
                        let src = &gout[((s0 + s) * cout + c) * hw..((s0 + s) * cout + c + 1) * hw];
                        gtmp[c * ld + s * hw..c * ld + (s + 1) * hw].copy_from_slice(src);
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    let mut cols = vec![0.0; ckk * ld];
                    for s in 0..sn {
                        g.im2col(&x[(s0 + s) * chw..(s0 + s + 1) * chw], &mut cols, ld, s * hw);
                    }
                    gemm_nt(cout, ld, ckk, &gtmp, &cols, gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let mut gcols = vec![0.0; ckk * ld];
                    gemm_tn(ckk, cout, ld, wv, &gtmp, &mut gcols);
                    for s in 0..sn {
                        g.col2im(&gcols, ld, s * hw, &mut gx[(s0 + s) * chw..(s0 + s + 1) * chw]);
                    }
                }
            }
            let mut res = vec![gx, gw];
            if let Some(need_b) = bias_slot {
                res.push(need_b.then(|| {
                    let mut gb = vec![0.0; cout];
                    for s in 0..n {
                        for (c, acc) in gb.iter_mut().enumerate() {
                            let base = (s * cout + c) * hw;
                            *acc += gout[base..base + hw].iter().sum::<f64>();
                        }
                    }
                    gb
                }));
            }
            res
        }),
    ))
}

/// 2×2 average pooling with stride 2. Odd trailing rows/columns are dropped.
pub fn avg_pool2d(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 || x.dim(2) < 2 || x.dim(3) < 2 {
        return Err(Error::shape("avg_pool2d", format!("need (N,C,H>=2,W>=2), got {:?}", x.shape())));
    }
    let [n, c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let (ho, wo) = (h / 2, w / 2);
    let xv = x.values("avg_pool2d")?;
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let b = p * h * w + 2 * oy * w + 2 * ox;
                out[(p * ho + oy) * wo + ox] = 0.25 * (xv[b] + xv[b + 1] + xv[b + w] + xv[b + w + 1]);
            }
        }
    }
    Ok(Tensor::from_op(
        "avg_pool2d",
        out,
        vec![n, c, ho, wo],
        x.dtype(),
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let v = 0.25 * g[(p * ho + oy) * wo + ox];
                        let b = p * h * w + 2 * oy * w + 2 * ox;
                        gx[b] += v;
                        gx[b + 1] += v;
                        gx[b + w] += v;
                        gx[b + w + 1] += v;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Mean over spatial axes: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape("global_avg_pool", format!("need 4-d input, got {:?}", x.shape())));
    }
    let (n, c) = (x.dim(0), x.dim(1));
    let hw = x.dim(2) * x.dim(3);
    x.reshape(&[n, c, hw])?.mean_axis(2, false)
}

/// Nearest-neighbour 2× upsampling of `(N, C, H, W)`.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape("upsample_nearest2x", format!("need 4-d input, got {:?}", x.shape())));
    }
    let [n, c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let (ho, wo) = (2 * h, 2 * w);
    let xv = x.values("upsample_nearest2x")?;
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                out[(p * ho + oy) * wo + ox] = xv[(p * h + oy / 2) * w + ox / 2];
            }
        }
    }
    Ok(Tensor::from_op(
        "upsample_nearest2x",
        out,
        vec![n, c, ho, wo],
        x.dtype(),
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        gx[(p * h + oy / 2) * w + ox / 2] += g[(p * ho + oy) * wo + ox];
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[allow(clippy::too_many_arguments)]
    fn loop_conv(x: &[f64], wt: &[f64], n: usize, cin: usize, h: usize, w: usize, cout: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                        continue;
                                    }
                                    acc += x[((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * wt[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((b * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_scaling() {
        let x = Tensor::ones(&[1, 1, 3, 3], DType::F32).unwrap();
        let w = Tensor::full(&[1, 1, 1, 1], 2.0, DType::F32).unwrap();
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.data(), &[2.0; 9]);
    }

    #[test]
    fn strided_output_size() {
        let x = Tensor::ones(&[1, 1, 4, 4], DType::F32).unwrap();
        let w = Tensor::ones(&[1, 1, 3, 3], DType::F32).unwrap();
        assert_eq!(conv2d(&x, &w, None, 2, 1).unwrap().shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(s, p) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let x = Tensor::randn(&[2, 2, 5, 5], 1.0, DType::F64, &mut rng).unwrap();
            let w = Tensor::randn(&[3, 2, 3, 3], 1.0, DType::F64, &mut rng).unwrap();
            let y = conv2d(&x, &w, None, s, p).unwrap();
            let want = loop_conv(x.data(), w.data(), 2, 2, 5, 5, 3, 3, s, p);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::ones(&[1, 2, 4, 4], DType::F32).unwrap();
        let w = Tensor::ones(&[1, 3, 3, 3], DType::F32).unwrap();
        assert!(conv2d(&x, &w, None, 1, 1).is_err());
        let w5 = Tensor::ones(&[1, 2, 5, 5], DType::F32).unwrap();
        assert!(conv2d(&x, &w5, None, 1, 2).is_err());
        let tiny = Tensor::ones(&[1, 2, 1, 1], DType::F32).unwrap();
        let w3 = Tensor::ones(&[1, 2, 3, 3], DType::F32).unwrap();
        assert!(conv2d(&tiny, &w3, None, 1, 0).is_err());
    }

    #[test]
    fn pool_and_upsample() {
        let x = Tensor::from_vec((0..16).map(|v| v as f64).collect(), &[1, 1, 4, 4], DType::F64).unwrap();
        let p = avg_pool2d(&x).unwrap();
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
        let u = upsample_nearest2x(&p).unwrap();
        assert_eq!(u.shape(), &[1, 1, 4, 4]);
        assert_eq!(u.data()[5], 2.5);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[7.5]);
    }
}
