use super::{count_macs, count_params, reconcile, ReconcileRow};
use crate::config::build_preset;
use crate::error::Result;

pub const PARAM_TOL: f64 = 0.02;
pub const MAC_TOL: f64 = 0.05;
pub const UNET_TOL: f64 = 0.10;

/// Published parameter counts in millions for the layout ablations.
pub const CONFIG_PARAMS_M: [(&str, f64); 15] = [
    ("c1", 55.0),
    ("c2", 73.0),
    ("c3", 41.0),
    ("c4", 50.0),
    ("c5", 95.0),
    ("c6", 51.0),
    ("c7", 42.0),
    ("c8", 34.0),
    ("c9", 30.0),
    ("c10", 72.0),
    ("t1", 56.0),
    ("t2", 57.0),
    ("t3", 64.0),
    ("t4", 55.0),
    ("t5", 100.0),
];

/// Published (params in millions, GMACs at 224²) for the classifier variants.
pub const VARIANTS: [(&str, f64, f64); 3] = [("ascan-t", 55.0, 7.7), ("ascan-b", 98.0, 16.7), ("ascan-l", 173.0, 30.7)];

pub const CLASS_COND_UNET_PARAMS_M: f64 = 400.0;

pub fn config_rows() -> Result<Vec<ReconcileRow>> {
    let mut rows = Vec::new();
    for (name, m) in CONFIG_PARAMS_M {
        let r = count_params(&build_preset(name)?)?;
        rows.push((format!("{name}.params"), r.total_params as f64, m * 1e6));
    }
    Ok(reconcile(&rows, PARAM_TOL))
}

pub fn variant_rows() -> Result<Vec<ReconcileRow>> {
    let mut params = Vec::new();
    let mut macs = Vec::new();
    for (name, p, g) in VARIANTS {
        let r = count_macs(&build_preset(name)?, (224, 224))?;
        params.push((format!("{name}.params"), r.total_params as f64, p * 1e6));
        macs.push((format!("{name}.macs@224"), r.total_macs as f64, g * 1e9));
    }
    let mut rows = reconcile(&params, PARAM_TOL);
    rows.extend(reconcile(&macs, MAC_TOL));
    Ok(rows)
}

pub fn unet_rows() -> Result<Vec<ReconcileRow>> {
    let r = count_params(&build_preset("unet-class-cond")?)?;
    Ok(reconcile(
        &[("unet-class-cond.params".into(), r.total_params as f64, CLASS_COND_UNET_PARAMS_M * 1e6)],
        UNET_TOL,
    ))
}

/// Every published count against the analytic model.
pub fn reference_rows() -> Result<Vec<ReconcileRow>> {
    let mut rows = config_rows()?;
    rows.extend(variant_rows()?);
    rows.extend(unet_rows()?);
    Ok(rows)
}
