//! Throughput and memory measurement.
//!
//! Warmup iterations run before the clock starts. Each repeat times
//! `iters` forwards individually; throughput of a repeat is
//! `batch·iters / elapsed` and the report keeps every raw timing, so all
//! aggregates can be recomputed.

mod compare;
mod memory;
mod targets;

pub use compare::{compare, render_compare, CompareRow};
pub use memory::{peak_rss_bytes, reset_peak_rss};
pub use targets::{ClassifierTarget, SpinTarget, UNetTarget};

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Something that can be timed at a given batch size.
pub trait BenchTarget {
    fn name(&self) -> String;
    /// Allocates inputs for `batch`; not timed.
    fn prepare(&mut self, batch: usize) -> Result<()>;
    fn run_once(&mut self) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    pub warmup: usize,
    pub iters: usize,
    pub repeats: usize,
    pub resolution: (usize, usize),
    pub precision: String,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch_sizes: vec![1, 16, 64],
            warmup: 10,
            iters: 50,
            repeats: 5,
            resolution: (224, 224),
            precision: "f32".into(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(Error::Config("batch sizes must be a nonempty list of positive integers".into()));
        }
        if self.warmup == 0 {
            return Err(Error::Config("warmup must be at least 1".into()));
        }
        if self.iters == 0 || self.repeats == 0 {
            return Err(Error::Config("iters and repeats must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub batch: usize,
    /// `None` when the cell ran; the failure message otherwise.
    pub error: Option<String>,
    /// Per repeat, the wall time of each timed iteration in seconds.
    pub iter_seconds: Vec<Vec<f64>>,
    pub throughput_mean: f64,
    pub throughput_std: f64,
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
    pub peak_bytes: Option<u64>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl BatchResult {
    /// Aggregates raw timings.
    pub fn from_timings(batch: usize, iter_seconds: Vec<Vec<f64>>, peak_bytes: Option<u64>) -> BatchResult {
        let thr: Vec<f64> = iter_seconds
            .iter()
            .map(|r| batch as f64 * r.len() as f64 / r.iter().sum::<f64>())
            .collect();
        let mean = thr.iter().sum::<f64>() / thr.len() as f64;
        let std = if thr.len() > 1 {
            (thr.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (thr.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut lat: Vec<f64> = iter_seconds.iter().flatten().map(|s| s * 1e3).collect();
        lat.sort_by(f64::total_cmp);
        BatchResult {
            batch,
            error: None,
            throughput_mean: mean,
            throughput_std: std,
            latency_p50_ms: percentile(&lat, 0.5),
            latency_p95_ms: percentile(&lat, 0.95),
            iter_seconds,
            peak_bytes,
        }
    }

    fn failed(batch: usize, message: String) -> BatchResult {
        BatchResult {
            batch,
            error: Some(message),
            iter_seconds: Vec::new(),
            throughput_mean: f64::NAN,
            throughput_std: f64::NAN,
            latency_p50_ms: f64::NAN,
            latency_p95_ms: f64::NAN,
            peak_bytes: None,
        }
    }

    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub host: String,
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub threads: usize,
    pub precision: String,
    pub timestamp: u64,
    pub tool_version: String,
}

impl Environment {
    pub fn capture(precision: &str) -> Environment {
        let host = std::fs::read_to_string("/proc/sys/kernel/hostname")
            .map(|s| s.trim().to_string())
            .or_else(|_| std::env::var("HOSTNAME"))
            .unwrap_or_else(|_| "unknown".into());
        Environment {
            host,
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            threads: 1,
            precision: precision.into(),
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model_id: String,
    pub spec_hash: Option<String>,
    pub resolution: (usize, usize),
    pub batch_sizes: Vec<usize>,
    pub per_batch: Vec<BatchResult>,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub repeats: usize,
    pub environment: Environment,
}

fn si(n: u64) -> String {
    let x = n as f64;
    match x {
        _ if x >= 1e9 => format!("{:.2}G", x / 1e9),
        _ if x >= 1e6 => format!("{:.2}M", x / 1e6),
        _ if x >= 1e3 => format!("{:.1}K", x / 1e3),
        _ => n.to_string(),
    }
}

impl BenchReport {
    pub fn row(&self, batch: usize) -> Option<&BatchResult> {
        self.per_batch.iter().find(|r| r.batch == batch)
    }

    /// True when every aggregate equals its recomputation from raw timings.
    pub fn is_consistent(&self) -> bool {
        self.per_batch.iter().filter(|r| r.ok()).all(|r| {
            let again = BatchResult::from_timings(r.batch, r.iter_seconds.clone(), r.peak_bytes);
            again == *r
        })
    }

    /// Fixed-width table: Params | MACs | one throughput column per batch.
    pub fn render_table(&self, params: Option<u64>, macs: Option<u64>) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<18} {:>10} {:>10}", "model", "Params", "MACs");
        for b in &self.batch_sizes {
            let _ = write!(s, " {:>14}", format!("B={b}"));
        }
        s.push('\n');
        let p = params.map_or("-".into(), si);
        let m = macs.map_or("-".into(), si);
        let _ = write!(s, "{:<18} {p:>10} {m:>10}", self.model_id);
        for r in &self.per_batch {
            let cell = if r.ok() { format!("{:.1}±{:.1}", r.throughput_mean, r.throughput_std) } else { "failed".into() };
            let _ = write!(s, " {cell:>14}");
        }
        s.push('\n');
        for r in &self.per_batch {
            match &r.error {
                None => {
                    let _ = writeln!(
                        s,
                        "  B={:<5} p50 {:>9.3} ms  p95 {:>9.3} ms  peak {}",
                        r.batch,
                        r.latency_p50_ms,
                        r.latency_p95_ms,
                        r.peak_bytes.map_or("n/a".into(), |b| format!("{:.1} MiB", b as f64 / (1 << 20) as f64))
                    );
                }
                Some(e) => {
                    let _ = writeln!(s, "  B={:<5} failed: {e}", r.batch);
                }
            }
        }
        s
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

fn measure(target: &mut dyn BenchTarget, batch: usize, cfg: &BenchConfig) -> Result<BatchResult> {
    target.prepare(batch)?;
    for _ in 0..cfg.warmup {
        target.run_once()?;
    }
    reset_peak_rss();
    let mut all = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let mut times = Vec::with_capacity(cfg.iters);
        for _ in 0..cfg.iters {
            let start = Instant::now();
            target.run_once()?;
            times.push(start.elapsed().as_secs_f64());
        }
        all.push(times);
    }
    Ok(BatchResult::from_timings(batch, all, peak_rss_bytes()))
}

/// Times `target` at every batch size. A batch size whose preparation or
/// execution fails (error or panic) becomes a failed cell.
pub fn run_bench(target: &mut dyn BenchTarget, cfg: &BenchConfig, spec_hash: Option<String>) -> Result<BenchReport> {
    cfg.validate()?;
    let mut per_batch = Vec::with_capacity(cfg.batch_sizes.len());
    for &b in &cfg.batch_sizes {
        let res = catch_unwind(AssertUnwindSafe(|| measure(target, b, cfg)));
        per_batch.push(match res {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => BatchResult::failed(b, e.to_string()),
            Err(p) => BatchResult::failed(b, panic_message(p)),
        });
        log::info!("batch {b}: {:?}", per_batch.last().map(|r| r.throughput_mean));
    }
    Ok(BenchReport {
        model_id: target.name(),
        spec_hash,
        resolution: cfg.resolution,
        batch_sizes: cfg.batch_sizes.clone(),
        per_batch,
        warmup_iters: cfg.warmup,
        timed_iters: cfg.iters,
        repeats: cfg.repeats,
        environment: Environment::capture(&cfg.precision),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub batch: usize,
    pub throughput: f64,
    /// Throughput per sample relative to the smallest batch size.
    pub efficiency: f64,
}

/// Per-sample throughput normalised to the smallest successful batch.
pub fn batch_scaling_curve(report: &BenchReport) -> Result<Vec<ScalingRow>> {
    let mut rows: Vec<&BatchResult> = report.per_batch.iter().filter(|r| r.ok()).collect();
    if rows.len() < 2 {
        return Err(Error::invalid("batch scaling needs >= 2 successful batch sizes"));
    }
    rows.sort_by_key(|r| r.batch);
    let base = rows[0].throughput_mean;
    Ok(rows
        .iter()
        .map(|r| ScalingRow { batch: r.batch, throughput: r.throughput_mean, efficiency: r.throughput_mean / base })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert!((percentile(&v, 0.95) - 4.8).abs() < 1e-12);
    }

    #[test]
    fn throughput_from_timings() {
        let r = BatchResult::from_timings(4, vec![vec![0.5, 0.5], vec![1.0, 1.0]], None);
        assert_eq!(r.throughput_mean, 6.0);
        assert!((r.throughput_std - 8f64.sqrt()).abs() < 1e-12);
    }
}
