use ascan_core::blocks::{
    drop_path, CBlock, ClassifierHeadLayer, ForwardCtx, Stem, TBlock, TBlockConfig,
};
use ascan_core::param::{grad_check_params, Builder, Param};
use ascan_core::tensor::{grad_check, rope_2d};
use ascan_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, DType::F64, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn zero(p: &Param) {
    p.set_data(vec![0.0; p.numel()]).unwrap();
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Direct convolution; `w` is `[cout][cin][k][k]` flattened.
#[allow(clippy::too_many_arguments)]
fn conv_loop(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], cout: usize, k: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let pad = k / 2;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for c in 0..cin {
                    for u in 0..k {
                        for v in 0..k {
                            let (y, xx) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                acc += x[(c * h + y as usize) * w + xx as usize] * wt[((o * cin + c) * k + u) * k + v];
                            }
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    (out, ho, wo)
}

#[test]
fn strided_c_block_matches_loop_oracle() {
    let (cin, cout, h) = (8, 6, 6);
    let b = Builder::new(3, DType::F64);
    let blk = CBlock::new(&b, cin, cout, 2, None, 0.0).unwrap();
    for (i, p) in b.store().params().iter().enumerate() {
        if p.name().ends_with("bias") || p.name().contains("norm") {
            p.set_data(randn(&p.shape(), 100 + i as u64).mul_scalar(0.3).to_vec()).unwrap();
        }
    }
    let x = randn(&[1, cin, h, h], 1);
    let y = blk.forward(&x, None, &ForwardCtx::eval()).unwrap();
    assert_eq!(y.shape(), &[1, cout, 3, 3]);

    let mid = 4 * cout;
    let (e, ho, wo) = conv_loop(x.data(), cin, h, h, blk.expand.weight.value().data(), mid, 3, 2);
    let (g, bb) = (blk.norm.weight.value().to_vec(), blk.norm.bias.value().to_vec());
    let hw = ho * wo;
    let act: Vec<f64> = (0..mid * hw).map(|i| gelu(e[i] / (1.0 + 1e-5f64).sqrt() * g[i / hw] + bb[i / hw])).collect();
    let pooled: Vec<f64> = (0..mid).map(|c| act[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
    let lin = |w: &[f64], b: &[f64], x: &[f64], out: usize| -> Vec<f64> {
        (0..out).map(|o| b[o] + (0..x.len()).map(|i| w[o * x.len() + i] * x[i]).sum::<f64>()).collect()
    };
    let r = &blk.se.reduce;
    let s = &blk.se.expand;
    let hidden: Vec<f64> = lin(r.weight.value().data(), r.bias.as_ref().unwrap().value().data(), &pooled, r.weight.shape()[0])
        .into_iter()
        .map(gelu)
        .collect();
    let gate: Vec<f64> =
        lin(s.weight.value().data(), s.bias.as_ref().unwrap().value().data(), &hidden, mid).into_iter().map(sigmoid).collect();
    let gated: Vec<f64> = (0..mid * hw).map(|i| act[i] * gate[i / hw]).collect();
    let (mut branch, _, _) = conv_loop(&gated, mid, ho, wo, blk.project.weight.value().data(), cout, 1, 1);
    let pb = blk.project.bias.as_ref().unwrap().value().to_vec();
    for (i, v) in branch.iter_mut().enumerate() {
        *v += pb[i / hw];
    }
    let sc = blk.shortcut.as_ref().expect("strided block has a shortcut");
    let pooled_x: Vec<f64> = (0..cin * hw)
        .map(|i| {
            let (c, p) = (i / hw, i % hw);
            let (r0, c0) = (2 * (p / wo), 2 * (p % wo));
            [(0, 0), (0, 1), (1, 0), (1, 1)].iter().map(|(a, b)| x.data()[(c * h + r0 + a) * h + c0 + b]).sum::<f64>() / 4.0
        })
        .collect();
    let (mut skip, _, _) = conv_loop(&pooled_x, cin, ho, wo, sc.conv.weight.value().data(), cout, 1, 1);
    let sb = sc.conv.bias.as_ref().unwrap().value().to_vec();
    let expect: Vec<f64> = skip.iter_mut().enumerate().map(|(i, v)| *v + sb[i / hw] + branch[i]).collect();
    let err = y.data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-6, "max err {err}");
}

#[test]
fn zero_projection_is_identity() {
    let b = Builder::new(0, DType::F64);
    let blk = CBlock::new(&b, 8, 8, 1, None, 0.0).unwrap();
    zero(&blk.project.weight);
    let x = randn(&[2, 8, 5, 5], 2);
    let y = blk.forward(&x, None, &ForwardCtx::train(0)).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn saturated_se_gate_equals_no_se() {
    let b = Builder::new(1, DType::F64);
    let blk = CBlock::new(&b, 4, 4, 1, None, 0.0).unwrap();
    zero(&blk.se.expand.weight);
    let bias = blk.se.expand.bias.as_ref().unwrap();
    bias.set_data(vec![1e3; bias.numel()]).unwrap();
    let x = randn(&[1, 4, 4, 4], 3);
    let ctx = ForwardCtx::eval();
    let y = blk.forward(&x, None, &ctx).unwrap();
    let h = ascan_core::tensor::gelu(&blk.pre_activation(&x, None, &ctx).unwrap());
    let no_se = x.add(&blk.project.forward(&h).unwrap()).unwrap();
    assert!(max_diff(&y, &no_se) < 1e-12);
}

#[test]
fn time_conditioning() {
    let b = Builder::new(2, DType::F64);
    let blk = CBlock::new(&b, 4, 4, 1, Some(6), 0.0).unwrap();
    let b2 = Builder::new(2, DType::F64);
    let plain = CBlock::new(&b2, 4, 4, 1, None, 0.0).unwrap();
    for p in b2.store().all() {
        p.set_data(b.store().get(p.name()).unwrap().value().to_vec()).unwrap();
    }
    let x = randn(&[2, 4, 3, 3], 4);
    let ctx = ForwardCtx::eval();
    let t1 = randn(&[2, 6], 5);
    let t2 = randn(&[2, 6], 6);
    let a = blk.forward(&x, Some(&t1), &ctx).unwrap();
    let c = blk.forward(&x, Some(&t2), &ctx).unwrap();
    assert!(max_diff(&a, &c) > 1e-6, "timestep has no effect");
    let proj = blk.time_proj.as_ref().unwrap();
    zero(&proj.weight);
    zero(proj.bias.as_ref().unwrap());
    let zeroed = blk.forward(&x, Some(&t1), &ctx).unwrap();
    let reference = plain.forward(&x, None, &ctx).unwrap();
    assert!(max_diff(&zeroed, &reference) < 1e-12);
    assert!(blk.forward(&x, None, &ctx).is_err());
}

#[test]
fn zero_output_t_block_is_identity() {
    let b = Builder::new(4, DType::F64);
    let t = TBlock::new(&b, &TBlockConfig::plain(8, 2)).unwrap();
    zero(&t.attn_out.weight);
    zero(t.attn_out.bias.as_ref().unwrap());
    zero(&t.mlp_out.weight);
    zero(t.mlp_out.bias.as_ref().unwrap());
    for x in [randn(&[2, 8, 3, 3], 7), randn(&[2, 9, 8], 8)] {
        let y = t.forward(&x, None, &ForwardCtx::eval()).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }
}

#[test]
fn t_block_map_and_sequence_agree() {
    let b = Builder::new(5, DType::F64);
    let t = TBlock::new(&b, &TBlockConfig::plain(8, 4)).unwrap();
    let x = randn(&[1, 8, 2, 3], 9);
    let y = t.forward(&x, None, &ForwardCtx::eval()).unwrap();
    let seq = x.reshape(&[1, 8, 6]).unwrap().permute(&[0, 2, 1]).unwrap();
    let ys = t.forward(&seq, None, &ForwardCtx::eval()).unwrap();
    let back = ys.permute(&[0, 2, 1]).unwrap().reshape(&[1, 8, 2, 3]).unwrap();
    assert!(max_diff(&y, &back) < 1e-12);
}

#[test]
fn zero_cross_projection_equals_unconditioned() {
    let cfg = TBlockConfig { context_dim: Some(5), rope: true, qk_norm: true, ..TBlockConfig::plain(8, 2) };
    let b = Builder::new(6, DType::F64);
    let t = TBlock::new(&b, &cfg).unwrap();
    let cross = t.cross.as_ref().unwrap();
    zero(&cross.out.weight);
    zero(cross.out.bias.as_ref().unwrap());
    let mut plain = t.clone();
    plain.cross = None;
    let x = randn(&[2, 8, 2, 2], 10);
    let c = randn(&[2, 3, 5], 11);
    let ctx = ForwardCtx::eval();
    let y = t.forward(&x, Some(&c), &ctx).unwrap();
    assert!(max_diff(&y, &plain.forward(&x, None, &ctx).unwrap()) < 1e-12);
    assert!(t.forward(&x, None, &ctx).is_err(), "conditioned block without context");
}

#[test]
fn rope_at_origin_is_identity() {
    let q = randn(&[1, 1, 1, 8], 12);
    assert_eq!(rope_2d(&q, &[(0, 0)], 10_000.0).unwrap().to_vec(), q.to_vec());
}

#[test]
fn stochastic_depth_modes() {
    let x = randn(&[6, 3], 13);
    assert_eq!(drop_path(&x, 0.0, &ForwardCtx::train(1)).unwrap().to_vec(), x.to_vec());
    assert_eq!(drop_path(&x, 0.0, &ForwardCtx::eval()).unwrap().to_vec(), x.to_vec());
    assert_eq!(drop_path(&x, 0.5, &ForwardCtx::eval()).unwrap().to_vec(), x.to_vec());
}

#[test]
fn classifier_stem_halves_resolution() {
    let b = Builder::new(7, DType::F32);
    let stem = Stem::new(&b, 3, 64, 2, 2).unwrap();
    let x = Tensor::randn(&[1, 3, 224, 224], 1.0, DType::F32, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    let y = stem.forward(&x, &ForwardCtx::eval()).unwrap();
    assert_eq!(y.shape(), &[1, 64, 112, 112]);
}

#[test]
fn head_on_constant_input() {
    let b = Builder::new(8, DType::F64);
    let head = ClassifierHeadLayer::new(&b, 4, 6, 5).unwrap();
    let x = Tensor::full(&[1, 4, 3, 3], 0.7, DType::F64).unwrap();
    let ctx = ForwardCtx::eval();
    let pre = head.pre_logits(&x, &ctx).unwrap();
    let point = Tensor::full(&[1, 4, 1, 1], 0.7, DType::F64).unwrap();
    let at_point = ascan_core::tensor::gelu(&head.norm.forward(&head.conv.forward(&point).unwrap(), &ctx).unwrap())
        .reshape(&[1, 6])
        .unwrap();
    assert!(max_diff(&pre, &at_point) < 1e-12);
    zero(&head.fc.weight);
    zero(head.fc.bias.as_ref().unwrap());
    let logits = head.forward(&randn(&[2, 4, 3, 3], 15), &ctx).unwrap();
    assert!(logits.data().iter().all(|v| *v == logits.data()[0]));
}

#[test]
fn c_block_gradients() {
    let b = Builder::new(9, DType::F64);
    let blk = CBlock::new(&b, 8, 8, 1, None, 0.0).unwrap();
    let ctx = ForwardCtx::train(0);
    let x = randn(&[1, 8, 6, 6], 16);
    let w = randn(&[1, 8, 6, 6], 17);
    let r = grad_check(|x| Ok(blk.forward(x, None, &ctx)?.mul(&w)?.sum()), &x, 1e-4).unwrap();
    assert!(r.passed, "{r:?}");
    let params = b.store().params();
    let r = grad_check_params(|| Ok(blk.forward(&x, None, &ctx)?.mul(&w)?.sum()), &params, Some(4), 1e-4).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn t_block_gradients_on_sequence_of_nine() {
    let b = Builder::new(10, DType::F64);
    let cfg = TBlockConfig { rel_pos_grid: Some(3), ..TBlockConfig::plain(8, 2) };
    let t = TBlock::new(&b, &cfg).unwrap();
    let x = randn(&[1, 8, 3, 3], 18);
    let w = randn(&[1, 8, 3, 3], 19);
    let ctx = ForwardCtx::eval();
    let r = grad_check(|x| Ok(t.forward(x, None, &ctx)?.mul(&w)?.sum()), &x, 1e-4).unwrap();
    assert!(r.passed, "{r:?}");
    let params = b.store().params();
    let r = grad_check_params(|| Ok(t.forward(&x, None, &ctx)?.mul(&w)?.sum()), &params, Some(4), 1e-4).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn c_block_rejects_wrong_channels() {
    let b = Builder::new(11, DType::F64);
    let blk = CBlock::new(&b, 4, 4, 1, None, 0.0).unwrap();
    assert!(blk.forward(&randn(&[1, 3, 4, 4], 20), None, &ForwardCtx::eval()).is_err());
}
