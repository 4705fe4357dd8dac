use ascan_core::analysis::count_macs;
use ascan_core::bench::{
    batch_scaling_curve, compare, run_bench, BatchResult, BenchConfig, BenchReport, BenchTarget, ClassifierTarget,
    Environment, SpinTarget,
};
use ascan_core::classifier::Classifier;
use ascan_core::config::build_preset;
use ascan_core::{DType, Error, Result};

fn quick(batches: &[usize]) -> BenchConfig {
    BenchConfig { batch_sizes: batches.to_vec(), warmup: 2, iters: 20, repeats: 5, resolution: (8, 8), ..Default::default() }
}

fn synthetic(batches: &[usize], seconds: impl Fn(usize) -> f64) -> BenchReport {
    let per_batch = batches
        .iter()
        .map(|&b| BatchResult::from_timings(b, vec![vec![seconds(b); 4]; 3], None))
        .collect();
    BenchReport {
        model_id: "synthetic".into(),
        spec_hash: None,
        resolution: (8, 8),
        batch_sizes: batches.to_vec(),
        per_batch,
        warmup_iters: 1,
        timed_iters: 4,
        repeats: 3,
        environment: Environment::capture("f64"),
    }
}

#[test]
fn defaults_match_protocol() {
    let c = BenchConfig::default();
    assert_eq!((c.warmup, c.iters, c.repeats), (10, 50, 5));
    assert_eq!(c.batch_sizes, vec![1, 16, 64]);
}

#[test]
fn toy_classifier_has_one_row_per_batch() {
    let spec = build_preset("toy-cls").unwrap();
    let model = Classifier::new(&spec, 0, DType::F32).unwrap();
    let mut target = ClassifierTarget::new(model, (8, 8), 0);
    let cfg = BenchConfig { iters: 3, repeats: 2, ..quick(&[1, 16, 64]) };
    let report = run_bench(&mut target, &cfg, None).unwrap();
    assert_eq!(report.per_batch.len(), 3);
    for (r, b) in report.per_batch.iter().zip([1, 16, 64]) {
        assert_eq!(r.batch, b);
        assert!(r.ok(), "{:?}", r.error);
        assert!(r.throughput_mean > 0.0 && r.throughput_mean.is_finite());
        assert!(r.throughput_std.is_finite());
        assert!(r.latency_p95_ms >= r.latency_p50_ms);
        assert_eq!(r.iter_seconds.len(), 2);
        assert!(r.iter_seconds.iter().all(|v| v.len() == 3));
    }
    assert!(report.is_consistent());
    let table = report.render_table(Some(1), Some(1));
    assert!(table.contains("B=16") && table.contains("Params") && table.contains("MACs"));
    let json = serde_json::to_string(&report).unwrap();
    let back: BenchReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.per_batch.len(), 3);
}

#[test]
fn repeated_fixed_workload_is_stable() {
    let mut t = SpinTarget::new("spin", 200_000);
    let report = run_bench(&mut t, &quick(&[4]), None).unwrap();
    let r = &report.per_batch[0];
    assert!(r.throughput_std / r.throughput_mean < 0.2, "{} / {}", r.throughput_std, r.throughput_mean);
}

#[test]
fn invalid_configs_rejected() {
    let mut t = SpinTarget::new("spin", 10);
    for cfg in [
        BenchConfig { warmup: 0, ..quick(&[1]) },
        BenchConfig { iters: 0, ..quick(&[1]) },
        BenchConfig { repeats: 0, ..quick(&[1]) },
        quick(&[]),
        quick(&[0, 4]),
    ] {
        assert!(matches!(run_bench(&mut t, &cfg, None), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn warmup_excluded_from_timings() {
    let mut slow = SpinTarget::new("slow-first", 200_000);
    slow.first_call_factor = 10;
    let mut plain = SpinTarget::new("plain", 200_000);
    let cfg = BenchConfig { warmup: 1, ..quick(&[4]) };
    let a = run_bench(&mut slow, &cfg, None).unwrap();
    let b = run_bench(&mut plain, &cfg, None).unwrap();
    let ratio = a.per_batch[0].throughput_mean / b.per_batch[0].throughput_mean;
    assert!((0.8..1.25).contains(&ratio), "ratio {ratio}");
    let first = a.per_batch[0].iter_seconds[0][0];
    assert!(first < 5.0 * a.per_batch[0].latency_p50_ms / 1e3, "slow call leaked into timings");
}

#[test]
fn fixed_overhead_scaling_matches_closed_form() {
    let c = 8.0;
    let unit = 1e-3;
    let batches = [1, 2, 4, 16, 64];
    let report = synthetic(&batches, |b| (b as f64 + c) * unit);
    let curve = batch_scaling_curve(&report).unwrap();
    let base = 1.0 / (1.0 + c);
    for row in &curve {
        let b = row.batch as f64;
        let expected = (b / (b + c)) / base;
        assert!((row.efficiency - expected).abs() < 1e-9, "B={b}: {} vs {expected}", row.efficiency);
        assert!((row.throughput - b / ((b + c) * unit)).abs() < 1e-6);
    }
    assert!(curve.windows(2).all(|w| w[1].efficiency > w[0].efficiency));
}

#[test]
fn linear_timings_give_flat_curve() {
    let report = synthetic(&[1, 16, 64], |b| b as f64 * 2e-3);
    for row in batch_scaling_curve(&report).unwrap() {
        assert!((row.efficiency - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_batch_scaling_rejected() {
    let report = synthetic(&[16], |b| b as f64);
    assert!(batch_scaling_curve(&report).is_err());
}

#[test]
fn inversion_flagged_for_cheaper_but_slower_model() {
    let small = count_macs(&build_preset("toy-cls").unwrap(), (8, 8)).unwrap();
    let mut big = small.clone();
    big.model = "big".into();
    big.total_macs = small.total_macs * 4;
    let mut fast = synthetic(&[16], |_| 1e-3);
    fast.model_id = "big".into();
    let mut slow = synthetic(&[16], |_| 4e-3);
    slow.model_id = "small".into();
    let rows = compare(&[slow, fast], &[small, big], 16).unwrap();
    assert_eq!((rows[0].macs_rank, rows[0].throughput_rank), (1, 2));
    assert_eq!((rows[1].macs_rank, rows[1].throughput_rank), (2, 1));
    assert!(rows.iter().all(|r| r.inversion));
}

#[test]
fn identical_models_not_inverted() {
    let cost = count_macs(&build_preset("toy-cls").unwrap(), (8, 8)).unwrap();
    let a = synthetic(&[16], |_| 1.00e-3);
    let b = synthetic(&[16], |_| 1.01e-3);
    let rows = compare(&[a, b], &[cost.clone(), cost], 16).unwrap();
    assert!(rows.iter().all(|r| !r.inversion));
}

#[test]
fn compare_rejects_resolution_mismatch() {
    let cost = count_macs(&build_preset("toy-cls").unwrap(), (16, 16)).unwrap();
    let r = synthetic(&[16], |_| 1e-3);
    assert!(compare(&[r], &[cost], 16).is_err());
}

#[test]
fn totals_recomputable_from_raw_timings() {
    let mut t = SpinTarget::new("spin", 2_000);
    let report = run_bench(&mut t, &quick(&[1, 8]), None).unwrap();
    assert!(report.is_consistent());
    for r in &report.per_batch {
        let thr: Vec<f64> =
            r.iter_seconds.iter().map(|rep| r.batch as f64 * rep.len() as f64 / rep.iter().sum::<f64>()).collect();
        let mean = thr.iter().sum::<f64>() / thr.len() as f64;
        assert!((mean - r.throughput_mean).abs() <= 1e-9 * mean);
    }
    let mut tampered = report.clone();
    tampered.per_batch[0].throughput_mean *= 2.0;
    assert!(!tampered.is_consistent());
}

struct Failing;

impl BenchTarget for Failing {
    fn name(&self) -> String {
        "failing".into()
    }
    fn prepare(&mut self, batch: usize) -> Result<()> {
        if batch > 8 {
            return Err(Error::InvalidArgument("out of memory".into()));
        }
        Ok(())
    }
    fn run_once(&mut self) -> Result<()> {
        Ok(())
    }
}

struct Panicking;

impl BenchTarget for Panicking {
    fn name(&self) -> String {
        "panicking".into()
    }
    fn prepare(&mut self, _batch: usize) -> Result<()> {
        Ok(())
    }
    fn run_once(&mut self) -> Result<()> {
        panic!("allocation failed")
    }
}

#[test]
fn failures_become_failed_cells() {
    let report = run_bench(&mut Failing, &quick(&[1, 64]), None).unwrap();
    assert!(report.per_batch[0].ok());
    assert!(report.per_batch[1].error.as_deref().unwrap().contains("out of memory"));
    assert!(report.render_table(None, None).contains("failed"));
    let report = run_bench(&mut Panicking, &quick(&[1]), None).unwrap();
    assert_eq!(report.per_batch[0].error.as_deref(), Some("allocation failed"));
}

#[test]
fn peak_memory_reported_on_linux() {
    if cfg!(target_os = "linux") {
        let mut t = SpinTarget::new("spin", 10);
        let report = run_bench(&mut t, &quick(&[1]), None).unwrap();
        assert!(report.per_batch[0].peak_bytes.unwrap_or(0) > 0);
    }
}
