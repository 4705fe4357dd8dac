use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ascan_core::analysis::reference::{config_rows, unet_rows, variant_rows};
use ascan_core::analysis::ReconcileRow;
use ascan_core::bench::{compare, run_bench, BatchResult, BenchConfig, BenchReport, Environment, SpinTarget};
use ascan_core::analysis::count_macs;
use ascan_core::check::{count_suite, grad_suite, rope_suite, schedule_suite, CheckRow};
use ascan_core::classifier::{train_epochs, Classifier, Dataset, TrainRecipe};
use ascan_core::config::build_preset;
use ascan_core::diffusion::{
    empirical_second_moments, make_schedule, sample_ddpm, train_gmm, ClassTokens, Conditioning, Gmm2d,
    GuidanceSchedule, ScheduleKind, ToyConfig, UNet,
};
use ascan_core::DType;

struct Verdict {
    id: &'static str,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn failing_reconcile(rows: &[ReconcileRow]) -> Vec<String> {
    rows.iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{} {:+.1}%", r.name, 100.0 * (r.actual / r.expected - 1.0)))
        .collect()
}

fn failing_checks<'a>(rows: impl IntoIterator<Item = &'a CheckRow>) -> Vec<String> {
    rows.into_iter().filter(|r| !r.passed).map(|r| format!("{} ({:.3e} > {:.1e})", r.name, r.measured, r.tol)).collect()
}

fn within(limit: Duration, took: Duration) -> Option<String> {
    (took > limit).then(|| format!("took {:.1}s, limit {:.0}s", took.as_secs_f64(), limit.as_secs_f64()))
}

fn verdict(id: &'static str, title: &'static str, mut problems: Vec<String>, summary: String, took: Option<(Duration, Duration)>) -> Verdict {
    if let Some((limit, t)) = took {
        problems.extend(within(limit, t));
    }
    let passed = problems.is_empty();
    let mut detail = summary;
    if !passed {
        detail = format!("{detail}; failing: {}", problems.join(", "));
    }
    Verdict { id, title, passed, detail }
}

fn c1_configs() -> Verdict {
    let (rows, took) = timed(|| config_rows().unwrap());
    let worst = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    verdict(
        "1",
        "config parameter counts within 2%",
        failing_reconcile(&rows),
        format!("{} rows, worst rel err {:.3}", rows.len(), worst),
        Some((Duration::from_secs(1), took)),
    )
}

fn c2_variants(counts: &[CheckRow]) -> Verdict {
    let (rows, took) = timed(|| variant_rows().unwrap());
    let mut problems = failing_reconcile(&rows);
    let registry: Vec<&CheckRow> = counts
        .iter()
        .filter(|r| r.name.ends_with("registry==analytic") && r.name.starts_with("ascan-"))
        .collect();
    assert_eq!(registry.len(), 3);
    problems.extend(failing_checks(registry.iter().copied()));
    verdict(
        "2",
        "variant params within 2%, MACs within 5%, registry == analytic",
        problems,
        format!("{} reconciliation rows, {} registry rows", rows.len(), registry.len()),
        Some((Duration::from_secs(10), took)),
    )
}

fn c3_unet() -> Verdict {
    let rows = unet_rows().unwrap();
    let r = &rows[0];
    verdict(
        "3",
        "class-conditional UNet near 400M params within 10%",
        failing_reconcile(&rows),
        format!("{:.1}M params", r.actual / 1e6),
        None,
    )
}

fn c4_grad() -> Verdict {
    let (rows, took) = timed(|| grad_suite().unwrap());
    let worst = rows.iter().map(|r| r.measured).fold(0.0, f64::max);
    verdict(
        "4",
        "gradient checks for primitives, blocks and UNet loss",
        failing_checks(&rows),
        format!("{} checks, worst rel err {:.2e}", rows.len(), worst),
        Some((Duration::from_secs(120), took)),
    )
}

fn c5_schedule(rows: &[CheckRow]) -> Verdict {
    let mine: Vec<&CheckRow> = rows.iter().filter(|r| r.suite == "schedule").collect();
    verdict(
        "5",
        "alpha_bar oracle, q_sample variance, resolution policy",
        failing_checks(mine.iter().copied()),
        format!("{} checks", mine.len()),
        None,
    )
}

fn c6_guidance(rows: &[CheckRow]) -> Verdict {
    let mine: Vec<&CheckRow> = rows.iter().filter(|r| r.suite == "guidance").collect();
    verdict(
        "6",
        "cfg affinity, sampled endpoints, s=1 bitwise unguided",
        failing_checks(mine.iter().copied()),
        format!("{} checks", mine.len()),
        None,
    )
}

fn c7_rope() -> Verdict {
    let rows = rope_suite().unwrap();
    verdict("7", "RoPE norm/offset and QK-norm unit RMS", failing_checks(&rows), format!("{} checks", rows.len()), None)
}

fn c8_toys() -> Verdict {
    let mut problems = Vec::new();
    let (summary, took) = timed(|| {
        let spec = build_preset("toy-cls").unwrap();
        let data = Dataset::two_blobs(128, [3, 8, 8], 1.0, 7);
        assert_eq!(data.num_classes, 2);
        let model = Classifier::with_classes(&spec, 2, 3, DType::F64).unwrap();
        let recipe = TrainRecipe::toy();
        let h = train_epochs(&model, &data, &recipe, 11, None).unwrap();
        let last = h.epochs.last().unwrap();
        if h.epochs.len() > 30 {
            problems.push(format!("{} epochs", h.epochs.len()));
        }
        if last.eval_acc < 0.95 {
            problems.push(format!("train acc {:.3}", last.eval_acc));
        }

        let m = UNet::new(&build_preset("toy-unet").unwrap(), 0, DType::F64).unwrap();
        let s = make_schedule(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let gmm = Gmm2d::default();
        let tokens = ClassTokens::new(3, 8, 1).unwrap();
        let r = train_gmm(&m, &gmm, &tokens, &s, &ToyConfig::default()).unwrap();
        let reduction = 1.0 - r.final_loss / r.zero_loss;
        if reduction < 0.5 {
            problems.push(format!("loss reduction {reduction:.3}"));
        }
        let n = 1000;
        let labels: Vec<usize> = (0..n).map(|i| if i < 400 { 0 } else if i < 750 { 1 } else { 2 }).collect();
        let cond = Conditioning::Context(tokens.context(&labels, DType::F64).unwrap());
        let x = sample_ddpm(&m, &s, &GuidanceSchedule::constant(1.0), 200, &[n, 2, 1, 1], &cond, 3, DType::F64).unwrap();
        let (got, want) = (empirical_second_moments(&x), gmm.second_moments());
        let mut worst: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                worst = worst.max((got[i][j] / want[i][j] - 1.0).abs());
            }
        }
        if worst > 0.10 {
            problems.push(format!("second-moment rel err {worst:.3}"));
        }
        format!(
            "cls acc {:.3} after {} epochs; gmm loss {:.3} vs zero-model {:.3}, moment err {:.3}",
            last.eval_acc,
            h.epochs.len(),
            r.final_loss,
            r.zero_loss,
            worst
        )
    });
    verdict("8", "toy classifier and Gaussian-mixture diffusion", problems, summary, Some((Duration::from_secs(600), took)))
}

fn c9_heun(rows: &[CheckRow]) -> Verdict {
    let mine: Vec<&CheckRow> = rows.iter().filter(|r| r.suite == "heun").collect();
    let ratios: Vec<String> = mine.iter().map(|r| format!("{:.3}", r.measured)).collect();
    verdict(
        "9",
        "Heun error ratio in [3.5, 4.5]",
        failing_checks(mine.iter().copied()),
        format!("|ratio-4| for {} refinements: {}", mine.len(), ratios.join(", ")),
        None,
    )
}

fn synthetic(model: &str, seconds: f64) -> BenchReport {
    BenchReport {
        model_id: model.into(),
        spec_hash: None,
        resolution: (8, 8),
        batch_sizes: vec![16],
        per_batch: vec![BatchResult::from_timings(16, vec![vec![seconds; 4]; 3], None)],
        warmup_iters: 1,
        timed_iters: 4,
        repeats: 3,
        environment: Environment::capture("f64"),
    }
}

fn c10_bench() -> Verdict {
    let mut problems = Vec::new();
    let cfg = BenchConfig { batch_sizes: vec![4], warmup: 1, iters: 20, repeats: 5, resolution: (8, 8), ..Default::default() };

    let mut slow = SpinTarget::new("slow-first", 200_000);
    slow.first_call_factor = 10;
    let mut plain = SpinTarget::new("plain", 200_000);
    let a = run_bench(&mut slow, &cfg, None).unwrap();
    let b = run_bench(&mut plain, &cfg, None).unwrap();
    let ratio = a.per_batch[0].throughput_mean / b.per_batch[0].throughput_mean;
    let first = a.per_batch[0].iter_seconds[0][0];
    if !(0.8..1.25).contains(&ratio) || first >= 5.0 * a.per_batch[0].latency_p50_ms / 1e3 {
        problems.push(format!("warmup leaked (throughput ratio {ratio:.3})"));
    }

    let r = &b.per_batch[0];
    let cv = r.throughput_std / r.throughput_mean;
    if cv >= 0.2 {
        problems.push(format!("std/mean {cv:.3}"));
    }

    let small = count_macs(&build_preset("toy-cls").unwrap(), (8, 8)).unwrap();
    let mut big = small.clone();
    big.model = "big".into();
    big.total_macs = small.total_macs * 4;
    let rows = compare(&[synthetic("small", 4e-3), synthetic("big", 1e-3)], &[small, big], 16).unwrap();
    let detected = rows.iter().all(|r| r.inversion);
    if !detected {
        problems.push("constructed inversion not flagged".into());
    }
    verdict(
        "10",
        "bench warmup exclusion, repeat stability, rank inversion",
        problems,
        format!("warmup ratio {ratio:.3}, std/mean {cv:.4}, inversion detected {detected}"),
        None,
    )
}

fn run_ascan(out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ascan"))
        .current_dir(out.parent().unwrap())
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("ASCAN_OUT_DIR")
        .output()
        .unwrap()
}

fn same_dirs(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = std::fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut other: Vec<_> = std::fs::read_dir(b).unwrap().map(|e| e.unwrap().file_name()).collect();
    other.sort();
    if names != other {
        return Err(format!("file sets differ in {}", a.display()));
    }
    for n in &names {
        if std::fs::read(a.join(n)).unwrap() != std::fs::read(b.join(n)).unwrap() {
            return Err(format!("{} differs", n.to_string_lossy()));
        }
    }
    Ok(names.len())
}

fn c11_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut problems = Vec::new();
    let mut files = 0;
    let runs: [(&str, Vec<&str>); 3] = [
        ("check", vec!["check"]),
        ("summarize", vec!["summarize", "--preset", "ascan-t", "--per-layer"]),
        ("sample", vec!["sample", "--checkpoint", "ckpt/checkpoint.ckpt", "--seed", "5"]),
    ];
    let ckpt = tmp.path().join("ckpt");
    let train = run_ascan(&ckpt, &["train-diff", "--iterations", "20", "--seed", "1"]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    for (name, args) in &runs {
        let mut outputs = Vec::new();
        for k in 0..2 {
            let dir = tmp.path().join(format!("{name}{k}"));
            let o = run_ascan(&dir, args);
            assert!(o.status.code().is_some_and(|c| c <= 1), "{name}: {}", String::from_utf8_lossy(&o.stderr));
            outputs.push((dir, o));
        }
        if outputs[0].1.stdout != outputs[1].1.stdout || outputs[0].1.status != outputs[1].1.status {
            problems.push(format!("{name} stdout/exit differs"));
        }
        match same_dirs(&outputs[0].0, &outputs[1].0) {
            Ok(n) => files += n,
            Err(e) => problems.push(format!("{name}: {e}")),
        }
    }
    verdict("11", "check, summarize and seeded sample byte-identical across runs", problems, format!("{files} output files compared"), None)
}

#[test]
fn acceptance() {
    let counts = count_suite().unwrap();
    let schedule = schedule_suite().unwrap();
    let mut verdicts = vec![c1_configs(), c2_variants(&counts), c3_unet(), c4_grad()];
    verdicts.push(c5_schedule(&schedule));
    verdicts.push(c6_guidance(&schedule));
    verdicts.push(c7_rope());
    verdicts.push(c8_toys());
    verdicts.push(c9_heun(&schedule));
    verdicts.push(c10_bench());
    verdicts.push(c11_determinism());

    for v in &verdicts {
        println!("[{}] {:>2} {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.id, v.title, v.detail);
    }
    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    println!("{} criteria, {} failed", verdicts.len(), failed.len());
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
