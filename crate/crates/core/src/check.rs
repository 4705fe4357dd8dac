//! Property suites shared by the `check` command and the acceptance run.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{count_params, reference, ReconcileRow};
use crate::blocks::{
    CBlock, ClassifierHeadLayer, ForwardCtx, LayerNorm, QkNorm, SqueezeExcite, Stem, TBlock, TBlockConfig, TimeEmbed,
    Transition,
};
use crate::classifier::Classifier;
use crate::config::{build_preset, ArchKind, PRESET_NAMES};
use crate::diffusion::{
    beta_end_for_resolution, cfg_combine, diffusion_loss, heun_integrate, make_schedule, sample_ddpm,
    synthetic_context, Conditioning, GuidanceSchedule, LossConfig, NoisePredictor, ScheduleKind, UNet,
};
use crate::error::{Error, Result};
use crate::param::{grad_check_params, Builder, Param};
use crate::tensor::{self, grad_check_many, DType, GradCheckReport, Tensor};

pub const GRAD_TOL: f64 = 1e-4;
pub const ALPHA_BAR_TOL: f64 = 1e-12;
pub const ROPE_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub suite: String,
    pub name: String,
    /// Error or deviation; compared against `tol`.
    pub measured: f64,
    pub tol: f64,
    pub passed: bool,
}

impl CheckRow {
    fn new(suite: &str, name: impl Into<String>, measured: f64, tol: f64) -> CheckRow {
        CheckRow { suite: suite.into(), name: name.into(), measured, tol, passed: measured <= tol }
    }

    fn flag(suite: &str, name: impl Into<String>, ok: bool) -> CheckRow {
        CheckRow { suite: suite.into(), name: name.into(), measured: if ok { 0.0 } else { 1.0 }, tol: 0.0, passed: ok }
    }

    fn from_grad(name: &str, r: &GradCheckReport) -> CheckRow {
        CheckRow { passed: r.passed, ..CheckRow::new("grad", name, r.max_rel_err, r.tol) }
    }

    fn from_reconcile(r: &ReconcileRow) -> CheckRow {
        CheckRow { passed: r.pass, ..CheckRow::new("counts", r.name.clone(), r.rel_err, r.tol) }
    }
}

pub fn all_passed(rows: &[CheckRow]) -> bool {
    rows.iter().all(|r| r.passed)
}

pub fn render(rows: &[CheckRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<9} {:<34} {:>12} {:>10}  verdict", "suite", "check", "measured", "tol");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<9} {:<34} {:>12.3e} {:>10.1e}  {}",
            r.suite,
            r.name,
            r.measured,
            r.tol,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    let _ = writeln!(s, "{} checks, {failed} failed", rows.len());
    s
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Result<Tensor> {
    Tensor::randn(shape, 1.0, DType::F64, &mut rng(seed))
}

/// Random linear functional of `y`, so every output element gets a distinct
/// upstream gradient.
fn probe(y: &Tensor) -> Result<Tensor> {
    let w = randn(y.shape(), 0xfeed + y.numel() as u64)?;
    Ok(y.mul(&w)?.sum())
}

fn primitive(name: &str, inputs: Vec<Tensor>, f: impl Fn(&[Tensor]) -> Result<Tensor>) -> Result<CheckRow> {
    let r = grad_check_many(|xs| probe(&f(xs)?), &inputs, Some(24), GRAD_TOL)?;
    Ok(CheckRow::from_grad(name, &r))
}

fn positive(shape: &[usize], seed: u64) -> Result<Tensor> {
    Ok(randn(shape, seed)?.square().add_scalar(0.5))
}

/// Every differentiable primitive against central differences.
pub fn primitive_rows() -> Result<Vec<CheckRow>> {
    let a = || randn(&[3, 4], 1);
    let row = || randn(&[1, 4], 2);
    let img = || randn(&[2, 3, 4, 4], 3);
    let mut rows = vec![
        primitive("add(broadcast)", vec![a()?, row()?], |x| x[0].add(&x[1]))?,
        primitive("sub(broadcast)", vec![a()?, row()?], |x| x[0].sub(&x[1]))?,
        primitive("mul(broadcast)", vec![a()?, row()?], |x| x[0].mul(&x[1]))?,
        primitive("div", vec![a()?, positive(&[3, 4], 4)?], |x| x[0].div(&x[1]))?,
        primitive("add_scalar", vec![a()?], |x| Ok(x[0].add_scalar(0.3)))?,
        primitive("mul_scalar", vec![a()?], |x| Ok(x[0].mul_scalar(-1.7)))?,
        primitive("neg", vec![a()?], |x| Ok(x[0].neg()))?,
        primitive("square", vec![a()?], |x| Ok(x[0].square()))?,
        primitive("sqrt", vec![positive(&[3, 4], 5)?], |x| Ok(x[0].sqrt()))?,
        primitive("exp", vec![a()?], |x| Ok(x[0].exp()))?,
        primitive("ln", vec![positive(&[3, 4], 6)?], |x| Ok(x[0].ln()))?,
        primitive("sum", vec![a()?], |x| Ok(x[0].sum()))?,
        primitive("mean", vec![a()?], |x| Ok(x[0].mean()))?,
        primitive("sum_axis", vec![img()?], |x| x[0].sum_axis(1, false))?,
        primitive("mean_axis", vec![img()?], |x| x[0].mean_axis(2, true))?,
        primitive("reshape", vec![a()?], |x| x[0].reshape(&[2, 6]))?,
        primitive("expand", vec![row()?], |x| x[0].expand(&[3, 4]))?,
        primitive("permute", vec![img()?], |x| x[0].permute(&[0, 2, 3, 1]))?,
        primitive("transpose", vec![a()?], |x| x[0].transpose(0, 1))?,
        primitive("concat", vec![a()?, randn(&[3, 2], 7)?], |x| Tensor::concat(&[x[0].clone(), x[1].clone()], 1))?,
        primitive("narrow", vec![img()?], |x| x[0].narrow(1, 1, 2))?,
        primitive("gather_last", vec![a()?], |x| x[0].gather_last(Arc::new(vec![3, 0, 0, 2, 1])))?,
        primitive("matmul", vec![randn(&[2, 3, 4], 8)?, randn(&[2, 4, 5], 9)?], |x| tensor::matmul(&x[0], &x[1]))?,
        primitive("linear", vec![randn(&[2, 3, 4], 10)?, randn(&[5, 4], 11)?, randn(&[5], 12)?], |x| {
            tensor::linear(&x[0], &x[1], Some(&x[2]))
        })?,
        primitive("conv2d(3x3,s2)", vec![randn(&[2, 3, 5, 5], 13)?, randn(&[4, 3, 3, 3], 14)?, randn(&[4], 15)?], |x| {
            tensor::conv2d(&x[0], &x[1], Some(&x[2]), 2, 1)
        })?,
        primitive("conv2d(1x1)", vec![img()?, randn(&[2, 3, 1, 1], 16)?], |x| tensor::conv2d(&x[0], &x[1], None, 1, 0))?,
        primitive("avg_pool2d", vec![img()?], |x| tensor::avg_pool2d(&x[0]))?,
        primitive("global_avg_pool", vec![img()?], |x| tensor::global_avg_pool(&x[0]))?,
        primitive("upsample_nearest2x", vec![img()?], |x| tensor::upsample_nearest2x(&x[0]))?,
        primitive("gelu", vec![a()?], |x| Ok(tensor::gelu(&x[0])))?,
        primitive("sigmoid", vec![a()?], |x| Ok(tensor::sigmoid(&x[0])))?,
        primitive("silu", vec![a()?], |x| Ok(tensor::silu(&x[0])))?,
        primitive("softmax", vec![a()?], |x| tensor::softmax(&x[0], 1))?,
        primitive("log_softmax", vec![a()?], |x| tensor::log_softmax(&x[0], 0))?,
        primitive("layer_norm", vec![a()?, randn(&[4], 17)?, randn(&[4], 18)?], |x| {
            tensor::layer_norm(&x[0], Some(&x[1]), Some(&x[2]), 1e-6)
        })?,
        primitive("rms_norm", vec![a()?, randn(&[4], 19)?], |x| tensor::rms_norm(&x[0], Some(&x[1]), 1e-6))?,
        primitive("batch_norm(train)", vec![img()?, randn(&[3], 20)?, randn(&[3], 21)?], |x| {
            Ok(tensor::batch_norm(&x[0], &x[1], &x[2], None, 1e-5)?.0)
        })?,
        primitive("rope_2d", vec![randn(&[1, 2, 6, 8], 22)?], |x| {
            let pos: Vec<(usize, usize)> = (0..6).map(|i| (i / 3, i % 3)).collect();
            tensor::rope_2d(&x[0], &pos, 10_000.0)
        })?,
        primitive(
            "attention(bias)",
            vec![randn(&[1, 2, 3, 4], 23)?, randn(&[1, 2, 5, 4], 24)?, randn(&[1, 2, 5, 4], 25)?, randn(&[1, 2, 3, 5], 26)?],
            |x| tensor::attention(&x[0], &x[1], &x[2], Some(&x[3])),
        )?,
        primitive("mse_loss", vec![a()?, randn(&[3, 4], 27)?], |x| tensor::mse_loss(&x[0], &x[1]))?,
    ];
    let targets = tensor::softmax(&randn(&[3, 4], 28)?, 1)?;
    let r = grad_check_many(|x| tensor::cross_entropy_soft(&x[0], &targets), &[a()?], None, GRAD_TOL)?;
    rows.push(CheckRow::from_grad("cross_entropy_soft", &r));
    Ok(rows)
}

/// Checks gradients with respect to the input and to every parameter.
fn block_row(name: &str, b: &Builder, input: Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<CheckRow> {
    let params: Vec<Param> = b.store().params();
    let x = input.clone();
    let wrt_params = grad_check_params(|| probe(&f(&x)?), &params, Some(3), GRAD_TOL)?;
    let wrt_input = grad_check_many(|xs| probe(&f(&xs[0])?), &[input], Some(24), GRAD_TOL)?;
    Ok(CheckRow::from_grad(name, &wrt_params.merge(&wrt_input)))
}

/// Every block type, in training mode where normalisation depends on it.
pub fn block_rows() -> Result<Vec<CheckRow>> {
    let train = ForwardCtx::train(0);
    let eval = ForwardCtx::eval();
    let mut rows = Vec::new();

    let b = Builder::new(1, DType::F64);
    let blk = CBlock::new(&b, 4, 4, 1, None, 0.0)?;
    rows.push(block_row("c_block", &b, randn(&[2, 4, 4, 4], 30)?, |x| blk.forward(x, None, &train))?);

    let b = Builder::new(2, DType::F64);
    let blk = CBlock::new(&b, 3, 6, 2, Some(8), 0.0)?;
    let temb = randn(&[2, 8], 31)?;
    rows.push(block_row("c_block(strided,time)", &b, randn(&[2, 3, 4, 4], 32)?, |x| {
        blk.forward(x, Some(&temb), &train)
    })?);

    let b = Builder::new(3, DType::F64);
    let se = SqueezeExcite::new(&b, 6, 2)?;
    rows.push(block_row("squeeze_excite", &b, randn(&[2, 6, 3, 3], 33)?, |x| se.forward(x))?);

    let b = Builder::new(4, DType::F64);
    let tr = Transition::new(&b, 4, 6, 2)?;
    rows.push(block_row("transition", &b, randn(&[2, 4, 4, 4], 34)?, |x| tr.forward(x))?);

    let b = Builder::new(5, DType::F64);
    let t = TBlock::new(&b, &TBlockConfig::plain(8, 2))?;
    rows.push(block_row("t_block", &b, randn(&[2, 8, 2, 3], 35)?, |x| t.forward(x, None, &eval))?);

    let b = Builder::new(6, DType::F64);
    let t = TBlock::new(&b, &TBlockConfig { rel_pos_grid: Some(3), ..TBlockConfig::plain(8, 2) })?;
    rows.push(block_row("t_block(rel_pos)", &b, randn(&[2, 8, 3, 3], 36)?, |x| t.forward(x, None, &eval))?);

    let b = Builder::new(7, DType::F64);
    let cfg = TBlockConfig { rope: true, qk_norm: true, context_dim: Some(6), ..TBlockConfig::plain(8, 2) };
    let t = TBlock::new(&b, &cfg)?;
    let context = randn(&[2, 3, 6], 37)?;
    rows.push(block_row("t_block(rope,qk_norm,cross)", &b, randn(&[2, 8, 2, 2], 38)?, |x| {
        t.forward(x, Some(&context), &eval)
    })?);

    let b = Builder::new(8, DType::F64);
    let t = TBlock::new(&b, &TBlockConfig::plain(8, 2))?;
    rows.push(block_row("t_block(sequence)", &b, randn(&[2, 5, 8], 39)?, |x| t.forward(x, None, &eval))?);

    let b = Builder::new(9, DType::F64);
    let n = QkNorm::new(&b, 4)?;
    let k = randn(&[1, 2, 3, 4], 40)?;
    rows.push(block_row("qk_norm", &b, randn(&[1, 2, 3, 4], 41)?, |q| {
        let (q, k) = n.apply(q, &k)?;
        q.add(&k)
    })?);

    let b = Builder::new(10, DType::F64);
    let ln = LayerNorm::new(&b, 5)?;
    rows.push(block_row("layer_norm_module", &b, randn(&[3, 5], 42)?, |x| ln.forward(x))?);

    let b = Builder::new(11, DType::F64);
    let stem = Stem::new(&b, 3, 4, 2, 2)?;
    rows.push(block_row("stem", &b, randn(&[2, 3, 4, 4], 43)?, |x| stem.forward(x, &train))?);

    let b = Builder::new(12, DType::F64);
    let head = ClassifierHeadLayer::new(&b, 4, 6, 3)?;
    rows.push(block_row("classifier_head", &b, randn(&[2, 4, 2, 2], 44)?, |x| head.forward(x, &train))?);

    let b = Builder::new(13, DType::F64);
    let te = TimeEmbed::new(&b, 8, 12)?;
    let params = b.store().params();
    let r = grad_check_params(|| probe(&te.forward(&[3.0, 700.0], DType::F64)?), &params, Some(3), GRAD_TOL)?;
    rows.push(CheckRow::from_grad("time_embed", &r));
    Ok(rows)
}

/// A two-level UNet end to end through the training loss.
pub fn unet_row() -> Result<CheckRow> {
    let m = UNet::new(&build_preset("toy-unet-img")?, 5, DType::F64)?;
    let s = make_schedule(100, ScheduleKind::Linear, 1e-4, 0.02)?;
    let z = randn(&[2, 2, 4, 4], 50)?;
    let c = synthetic_context(2, 2, 8, 1, DType::F64)?;
    let cfg = LossConfig { p_uncond: 0.5, offset_noise: 0.05 };
    let params = m.store().params();
    let r = grad_check_params(
        || diffusion_loss(&m, &z, Some(&c), &s, &cfg, &ForwardCtx::train(0), &mut rng(51)),
        &params,
        Some(2),
        GRAD_TOL,
    )?;
    Ok(CheckRow::from_grad("unet(2-level).diffusion_loss", &r))
}

pub fn grad_suite() -> Result<Vec<CheckRow>> {
    let mut rows = primitive_rows()?;
    rows.extend(block_rows()?);
    rows.push(unet_row()?);
    Ok(rows)
}

/// Published counts plus registry-vs-analytic equality for every preset.
pub fn count_suite() -> Result<Vec<CheckRow>> {
    let mut rows: Vec<CheckRow> = reference::reference_rows()?.iter().map(CheckRow::from_reconcile).collect();
    for name in PRESET_NAMES {
        let spec = build_preset(name)?;
        let analytic = count_params(&spec)?.total_params;
        let b = Builder::meta(DType::F32);
        match spec.kind {
            ArchKind::Classifier => {
                Classifier::build(&spec, &b)?;
            }
            ArchKind::Unet => {
                UNet::build(&spec, &b)?;
            }
        }
        let registry = b.store().num_params() as u64;
        let diff = (registry as f64 - analytic as f64).abs();
        rows.push(CheckRow::new("counts", format!("{name}.registry==analytic"), diff, 0.0));
    }
    Ok(rows)
}

/// ᾱ as a compensated (double-double) running product.
pub fn extended_alpha_bars(alphas: &[f64]) -> Vec<f64> {
    let (mut hi, mut lo) = (1.0f64, 0.0f64);
    alphas
        .iter()
        .map(|&a| {
            let p = hi * a;
            let e = hi.mul_add(a, -p) + lo * a;
            hi = p + e;
            lo = e - (hi - p);
            hi + lo
        })
        .collect()
}

/// Wraps a model so any unconditional call is an error.
struct CondOnly<'a>(&'a UNet);

impl NoisePredictor for CondOnly<'_> {
    fn predict_with(&self, z: &Tensor, t: &[f64], cond: &Conditioning, ctx: &ForwardCtx) -> Result<Tensor> {
        match cond {
            Conditioning::Context(_) => self.0.predict_with(z, t, cond, ctx),
            _ => Err(Error::InvalidArgument("unconditional prediction requested".into())),
        }
    }
}

/// Noise-schedule identities, guidance and the Heun convergence order.
pub fn schedule_suite() -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for kind in [ScheduleKind::Linear, ScheduleKind::ScaledLinear] {
        let s = make_schedule(1000, kind, kind.default_beta_start(), 0.02)?;
        let oracle = extended_alpha_bars(&s.alphas);
        let err = s.alpha_bars.iter().zip(&oracle).map(|(a, o)| (a - o).abs()).fold(0.0, f64::max);
        rows.push(CheckRow::new("schedule", format!("alpha_bar.{kind:?}"), err, ALPHA_BAR_TOL));
    }

    let s = make_schedule(1000, ScheduleKind::Linear, 1e-4, 0.02)?;
    let n = 100_000;
    for t in [1, 500, 1000] {
        let z = randn(&[n, 1], 60 + t as u64)?;
        let eps = randn(&[n, 1], 70 + t as u64)?;
        let zt = s.q_sample(&z, &vec![t; n], &eps, 0.0, &mut rng(0))?;
        let d = zt.data();
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let three_sigma = 3.0 * (2.0 / (n - 1) as f64).sqrt();
        rows.push(CheckRow::new("schedule", format!("q_sample.var(t={t})"), (var - 1.0).abs(), three_sigma));
    }
    rows.push(CheckRow::new("schedule", "beta_end(256)=0.01", (beta_end_for_resolution(256) - 0.01).abs(), 0.0));
    for r in [512, 1024] {
        rows.push(CheckRow::new("schedule", format!("beta_end({r})=0.02"), (beta_end_for_resolution(r) - 0.02).abs(), 0.0));
    }

    let c = randn(&[2, 3], 80)?;
    let u = randn(&[2, 3], 81)?;
    let mut affine = 0.0f64;
    for sc in [0.0, 1.0, 2.5] {
        let got = cfg_combine(&c, &u, sc)?;
        for ((g, cv), uv) in got.data().iter().zip(c.data()).zip(u.data()) {
            affine = affine.max((g - (uv + sc * (cv - uv))).abs());
        }
    }
    rows.push(CheckRow::new("guidance", "cfg_combine.affine(0,1,2.5)", affine, 1e-12));
    let g = GuidanceSchedule::sampled_default();
    rows.push(CheckRow::new("guidance", "sampled(step 5)=1.1", (g.at(5, 30) - 1.1).abs(), 1e-12));
    rows.push(CheckRow::new("guidance", "sampled(step 30)=3.6", (g.at(30, 30) - 3.6).abs(), 1e-12));

    let m = UNet::new(&build_preset("toy-unet-img")?, 0, DType::F64)?;
    let small = make_schedule(100, ScheduleKind::Linear, 1e-4, 0.02)?;
    let cond = Conditioning::Context(synthetic_context(2, 2, 8, 1, DType::F64)?);
    let shape = [2, 2, 4, 4];
    let unguided = sample_ddpm(&CondOnly(&m), &small, &GuidanceSchedule::constant(1.0), 8, &shape, &cond, 9, DType::F64)?;
    let unit = sample_ddpm(&m, &small, &GuidanceSchedule::sampled((1, 8), (1.0, 1.0)), 8, &shape, &cond, 9, DType::F64)?;
    let bitwise = unguided.data().iter().zip(unit.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    rows.push(CheckRow::flag("guidance", "s=1 trajectory == unguided", bitwise));

    // dx/dσ = a·x from σ = 2 to σ = 0.5
    let a = 0.8;
    let heun_err = |n: usize| -> Result<f64> {
        let sig: Vec<f64> = (0..=n).map(|i| 2.0 - 1.5 * i as f64 / n as f64).collect();
        let x = heun_integrate(vec![1.0], &sig, |x, _, _| Ok(vec![a * x[0]]))?;
        Ok((x[0] - (a * (0.5 - 2.0)).exp()).abs())
    };
    for n in [8, 16, 32] {
        let ratio = heun_err(n)? / heun_err(2 * n)?;
        rows.push(CheckRow::new("heun", format!("order(n={n}) |ratio-4|"), (ratio - 4.0).abs(), 0.5));
    }
    Ok(rows)
}

/// RoPE isometry and relative-offset invariance; unit RMS after QK norm.
pub fn rope_suite() -> Result<Vec<CheckRow>> {
    let dh = 8;
    let grid: Vec<(usize, usize)> = (0..16).map(|i| (i / 4, i % 4)).collect();
    let x = randn(&[1, 2, 16, dh], 90)?;
    let y = tensor::rope_2d(&x, &grid, 10_000.0)?;
    let mut norm_err = 0.0f64;
    for (a, b) in x.data().chunks(dh).zip(y.data().chunks(dh)) {
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        norm_err = norm_err.max((na - nb).abs());
    }

    let q = randn(&[1, 1, 1, dh], 91)?;
    let k = randn(&[1, 1, 1, dh], 92)?;
    let dot = |pq: (usize, usize), pk: (usize, usize)| -> Result<f64> {
        let rq = tensor::rope_2d(&q, &[pq], 10_000.0)?;
        let rk = tensor::rope_2d(&k, &[pk], 10_000.0)?;
        Ok(rq.data().iter().zip(rk.data()).map(|(a, b)| a * b).sum())
    };
    let mut shift_err = 0.0f64;
    for ((pq, pk), (dy, dx)) in [(((1, 2), (0, 0)), (3, 5)), (((4, 1), (2, 3)), (7, 2)), (((0, 0), (5, 5)), (1, 9))] {
        let base = dot(pq, pk)?;
        let moved = dot((pq.0 + dy, pq.1 + dx), (pk.0 + dy, pk.1 + dx))?;
        shift_err = shift_err.max((base - moved).abs());
    }

    let b = Builder::new(0, DType::F64);
    let n = QkNorm::new(&b, dh)?;
    let qs = randn(&[2, 3, 5, dh], 93)?.mul_scalar(3.0);
    let (qn, kn) = n.apply(&qs, &qs.mul_scalar(0.5))?;
    let mut rms_err = 0.0f64;
    for t in [qn, kn] {
        for v in t.data().chunks(dh) {
            let rms = (v.iter().map(|x| x * x).sum::<f64>() / dh as f64).sqrt();
            rms_err = rms_err.max((rms - 1.0).abs());
        }
    }
    Ok(vec![
        CheckRow::new("rope", "norm preserved", norm_err, ROPE_TOL),
        CheckRow::new("rope", "relative-offset invariance", shift_err, ROPE_TOL),
        CheckRow::new("rope", "qk_rms_norm unit rms", rms_err, ROPE_TOL),
    ])
}
