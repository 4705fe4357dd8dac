use std::fmt::Write as _;

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReconcileRow {
    pub name: String,
    pub actual: f64,
    pub expected: f64,
    pub rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Compares `(name, actual, expected)` rows at relative tolerance `tol`.
pub fn reconcile(rows: &[(String, f64, f64)], tol: f64) -> Vec<ReconcileRow> {
    rows.iter()
        .map(|(name, actual, expected)| {
            let rel_err = (actual - expected).abs() / expected.abs();
            ReconcileRow {
                name: name.clone(),
                actual: *actual,
                expected: *expected,
                rel_err,
                tol,
                pass: rel_err <= tol,
            }
        })
        .collect()
}

pub fn render_reconcile(rows: &[ReconcileRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<22} {:>14} {:>14} {:>9} {:>6}  verdict", "row", "actual", "expected", "rel_err", "tol");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<22} {:>14.4e} {:>14.4e} {:>8.2}% {:>5.1}%  {}",
            r.name,
            r.actual,
            r.expected,
            100.0 * r.rel_err,
            100.0 * r.tol,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubled_value_fails() {
        let rows = reconcile(&[("x".into(), 4.0 * 55e6, 55e6), ("y".into(), 55.5e6, 55e6)], 0.02);
        assert!(!rows[0].pass);
        assert!((rows[0].rel_err - 3.0).abs() < 1e-12);
        assert!(rows[1].pass);
    }
}
