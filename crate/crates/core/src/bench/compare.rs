use std::fmt::Write as _;

use serde::Serialize;

use super::BenchReport;
use crate::analysis::CostReport;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub model: String,
    pub macs: u64,
    pub throughput: f64,
    /// 1 = fewest MACs.
    pub macs_rank: usize,
    /// 1 = highest throughput.
    pub throughput_rank: usize,
    /// Some other model has strictly fewer MACs and strictly higher
    /// throughput, or strictly more MACs and strictly lower throughput,
    /// than this one.
    pub inversion: bool,
}

fn competition_rank(values: &[f64], ascending: bool) -> Vec<usize> {
    values
        .iter()
        .map(|v| {
            1 + values.iter().filter(|w| if ascending { *w < v } else { *w > v }).count()
        })
        .collect()
}

/// Pairs bench reports with cost reports (same order) at `batch`.
pub fn compare(reports: &[BenchReport], costs: &[CostReport], batch: usize) -> Result<Vec<CompareRow>> {
    if reports.len() != costs.len() {
        return Err(Error::invalid(format!("{} bench reports for {} cost reports", reports.len(), costs.len())));
    }
    let mut macs = Vec::with_capacity(reports.len());
    let mut thr = Vec::with_capacity(reports.len());
    for (r, c) in reports.iter().zip(costs) {
        if r.resolution != c.resolution {
            return Err(Error::invalid(format!(
                "{}: benchmarked at {:?} but costed at {:?}",
                r.model_id, r.resolution, c.resolution
            )));
        }
        let row = r
            .row(batch)
            .filter(|b| b.ok())
            .ok_or_else(|| Error::invalid(format!("{}: no successful measurement at batch {batch}", r.model_id)))?;
        macs.push(c.total_macs);
        thr.push(row.throughput_mean);
    }
    let mr = competition_rank(&macs.iter().map(|&m| m as f64).collect::<Vec<_>>(), true);
    let tr = competition_rank(&thr, false);
    Ok((0..reports.len())
        .map(|i| {
            let inversion = (0..reports.len()).any(|j| {
                (macs[j] < macs[i] && thr[j] < thr[i]) || (macs[j] > macs[i] && thr[j] > thr[i])
            });
            CompareRow {
                model: reports[i].model_id.clone(),
                macs: macs[i],
                throughput: thr[i],
                macs_rank: mr[i],
                throughput_rank: tr[i],
                inversion,
            }
        })
        .collect())
}

pub fn render_compare(rows: &[CompareRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<18} {:>10} {:>14} {:>9} {:>9}  inversion", "model", "MACs", "samples/s", "MACs#", "thr#");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<18} {:>9.2}G {:>14.2} {:>9} {:>9}  {}",
            r.model,
            r.macs as f64 / 1e9,
            r.throughput,
            r.macs_rank,
            r.throughput_rank,
            if r.inversion { "yes" } else { "no" }
        );
    }
    s
}
