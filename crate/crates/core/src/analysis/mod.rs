//! Analytic parameter and MAC counts.
//!
//! Conventions: one multiply-accumulate is one MAC. A k×k convolution costs
//! `H'·W'·Cout·Cin·k²` per sample, a linear layer `L·in·out` over `L` rows,
//! self-attention `2·L²·d` (logits plus weighted sum) and cross-attention
//! `2·L·S·d`. Normalisation, activations, softmax, pooling and the SE gate
//! multiply count as zero. Relative-position tables are counted as
//! parameters, RoPE has none.

mod reconcile;
pub mod reference;

pub use reconcile::{reconcile, render_reconcile, ReconcileRow};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::config::{ArchKind, ArchSpec, BlockKind, SkipMode};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    Conv,
    Linear,
    Norm,
    Attention,
    Table,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub path: String,
    pub kind: CostKind,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub model: String,
    pub resolution: (usize, usize),
    pub per_layer: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
    pub conventions: Vec<String>,
}

pub const CONVENTIONS: [&str; 5] = [
    "1 multiply-accumulate = 1 MAC, per sample",
    "conv: H'*W'*Cout*Cin*k^2; linear: rows*in*out",
    "self-attention: 2*L^2*d; cross-attention: 2*L*S*d",
    "norms, activations, softmax, pooling and gating: 0",
    "relative-position tables counted as parameters; RoPE: 0",
];

impl CostReport {
    /// Subtotals keyed by the leading path component(s): `stem`,
    /// `stage{i}`, `head`, `down.stage{i}`, ...
    pub fn group_totals(&self) -> BTreeMap<String, (u64, u64)> {
        let mut out = BTreeMap::new();
        for l in &self.per_layer {
            let mut parts = l.path.split('.');
            let first = parts.next().unwrap_or_default();
            let key = if matches!(first, "down" | "up") {
                format!("{first}.{}", parts.next().unwrap_or_default())
            } else {
                first.to_string()
            };
            let e = out.entry(key).or_insert((0, 0));
            e.0 += l.params;
            e.1 += l.macs;
        }
        out
    }

    pub fn macs_of(&self, kind: CostKind) -> u64 {
        self.per_layer.iter().filter(|l| l.kind == kind).map(|l| l.macs).sum()
    }

    /// Line-oriented table: one row per group, then the total.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model {} @ {}x{}", self.model, self.resolution.0, self.resolution.1);
        let _ = writeln!(s, "{:<16} {:>14} {:>18}", "group", "params", "MACs");
        for (k, (p, m)) in self.group_totals() {
            let _ = writeln!(s, "{k:<16} {p:>14} {m:>18}");
        }
        let _ = writeln!(
            s,
            "{:<16} {:>14} {:>18}   ({:.2}M params, {:.2}G MACs)",
            "total",
            self.total_params,
            self.total_macs,
            self.total_params as f64 / 1e6,
            self.total_macs as f64 / 1e9
        );
        s
    }
}

struct Walker {
    layers: Vec<LayerCost>,
}

impl Walker {
    fn push(&mut self, path: String, kind: CostKind, params: usize, macs: usize) {
        self.layers.push(LayerCost { path, kind, params: params as u64, macs: macs as u64 });
    }

    /// Returns the output side lengths.
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, path: String, cin: usize, cout: usize, k: usize, stride: usize, bias: bool, hw: (usize, usize)) -> (usize, usize) {
        let pad = k / 2;
        let ho = (hw.0 + 2 * pad - k) / stride + 1;
        let wo = (hw.1 + 2 * pad - k) / stride + 1;
        let params = cout * cin * k * k + if bias { cout } else { 0 };
        self.push(path, CostKind::Conv, params, ho * wo * cout * cin * k * k);
        (ho, wo)
    }

    fn linear(&mut self, path: String, input: usize, output: usize, rows: usize, bias: bool) {
        self.push(path, CostKind::Linear, input * output + if bias { output } else { 0 }, rows * input * output);
    }

    fn norm(&mut self, path: String, params: usize) {
        self.push(path, CostKind::Norm, params, 0);
    }

    fn transition(&mut self, path: &str, cin: usize, cout: usize, stride: usize, hw: (usize, usize)) -> (usize, usize) {
        let pooled = if stride == 2 { (hw.0 / 2, hw.1 / 2) } else { hw };
        self.conv(format!("{path}.shortcut"), cin, cout, 1, 1, true, pooled)
    }

    #[allow(clippy::too_many_arguments)]
    fn c_block(&mut self, path: &str, cin: usize, cout: usize, stride: usize, time_dim: Option<usize>, hw: (usize, usize)) -> (usize, usize) {
        let mid = 4 * cout;
        let out = self.conv(format!("{path}.expand"), cin, mid, 3, stride, false, hw);
        self.norm(format!("{path}.norm"), 2 * mid);
        if let Some(t) = time_dim {
            self.linear(format!("{path}.time_proj"), t, mid, 1, true);
        }
        let h = ((cout as f64 * 0.25).round() as usize).max(1);
        self.linear(format!("{path}.se.reduce"), mid, h, 1, true);
        self.linear(format!("{path}.se.expand"), h, mid, 1, true);
        self.conv(format!("{path}.project"), mid, cout, 1, 1, true, out);
        if stride != 1 || cin != cout {
            self.transition(path, cin, cout, stride, hw);
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn t_block(&mut self, path: &str, d: usize, heads: usize, l: usize, rel_grid: Option<usize>, cond: Option<(usize, usize)>) {
        self.norm(format!("{path}.norm"), 2 * d);
        self.linear(format!("{path}.qkv"), d, 3 * d, l, true);
        self.push(format!("{path}.attn"), CostKind::Attention, 0, 2 * l * l * d);
        self.linear(format!("{path}.attn_out"), d, d, l, true);
        self.linear(format!("{path}.mlp_in"), d, 4 * d, l, true);
        self.linear(format!("{path}.mlp_out"), 4 * d, d, l, true);
        if let Some(g) = rel_grid {
            self.push(format!("{path}.pos"), CostKind::Table, heads * (2 * g - 1) * (2 * g - 1), 0);
        }
        if let Some((ctx_dim, s)) = cond {
            let dh = d / heads;
            self.norm(format!("{path}.qk_norm"), 2 * dh);
            self.linear(format!("{path}.cross.q"), d, d, l, true);
            self.linear(format!("{path}.cross.kv"), ctx_dim, 2 * d, s, true);
            self.push(format!("{path}.cross.attn"), CostKind::Attention, 0, 2 * l * s * d);
            self.linear(format!("{path}.cross.out"), d, d, l, true);
            self.norm(format!("{path}.cross.qk_norm"), 2 * dh);
        }
    }
}

struct StageCtx {
    time_dim: Option<usize>,
    rel_grid: Option<usize>,
    cond: Option<(usize, usize)>,
}

#[allow(clippy::too_many_arguments)]
fn walk_stage(
    w: &mut Walker,
    prefix: &str,
    blocks: &[BlockKind],
    cin: usize,
    cout: usize,
    stride: usize,
    heads: Option<usize>,
    mut hw: (usize, usize),
    sc: &StageCtx,
) -> Result<(usize, usize)> {
    let mut ci = cin;
    for (j, &k) in blocks.iter().enumerate() {
        let path = format!("{prefix}.block{j}");
        let s = if j == 0 { stride } else { 1 };
        if j == 0 && k.is_attention() && (s != 1 || ci != cout) {
            hw = w.transition(&path, ci, cout, s, hw);
        } else if k.is_conv() {
            let t = if k.is_conditioned() { sc.time_dim } else { None };
            hw = w.c_block(&path, ci, cout, s, t, hw);
        } else {
            let heads = heads.ok_or_else(|| Error::Config(format!("{prefix}: T block without a head count")))?;
            let cond = if k.is_conditioned() { sc.cond } else { None };
            let grid = if k.is_conditioned() { None } else { sc.rel_grid };
            w.t_block(&path, cout, heads, hw.0 * hw.1, grid, cond);
        }
        ci = cout;
    }
    Ok(hw)
}

fn walk_classifier(spec: &ArchSpec, res: (usize, usize)) -> Result<Vec<LayerCost>> {
    let head = spec.classifier_head()?;
    let mut w = Walker { layers: Vec::new() };
    let mut hw = res;
    let mut ci = spec.input_channels;
    for i in 0..spec.stem.convs {
        let s = if i == 0 { spec.stem.stride } else { 1 };
        hw = w.conv(format!("stem.conv{i}"), ci, spec.stem.out_channels, 3, s, false, hw);
        w.norm(format!("stem.norm{i}"), 2 * spec.stem.out_channels);
        ci = spec.stem.out_channels;
    }
    let mut reduction = spec.stem.stride;
    for (i, s) in spec.stages.iter().enumerate() {
        reduction *= s.entry_stride;
        let sc = StageCtx { time_dim: None, rel_grid: Some((head.image_size / reduction).max(1)), cond: None };
        hw = walk_stage(&mut w, &format!("stage{i}"), &s.blocks, ci, s.out_channels, s.entry_stride, s.num_heads, hw, &sc)?;
        ci = s.out_channels;
    }
    w.conv("head.conv".into(), ci, head.embed_dim, 1, 1, false, hw);
    w.norm("head.norm".into(), 2 * head.embed_dim);
    w.linear("head.fc".into(), head.embed_dim, head.num_classes, 1, true);
    Ok(w.layers)
}

fn walk_unet(spec: &ArchSpec, res: (usize, usize)) -> Result<Vec<LayerCost>> {
    let h = spec.unet_head()?;
    let mut w = Walker { layers: Vec::new() };
    let c0 = spec.stem.out_channels;
    let tau = h.time_embed_dim;
    let s_len = h.context_len;
    w.linear("time_embed.linear1".into(), c0, tau, 1, true);
    w.linear("time_embed.linear2".into(), tau, tau, 1, true);
    for a in 0..h.adapter_blocks {
        w.t_block(&format!("adapter.block{a}"), h.context_dim, h.adapter_heads, s_len, None, None);
    }
    w.push("null_context".into(), CostKind::Table, h.context_dim, 0);
    let mut hw = w.conv("conv_in".into(), spec.input_channels, c0, 3, 1, true, res);
    let sc = StageCtx { time_dim: Some(tau), rel_grid: None, cond: Some((h.context_dim, s_len)) };
    let mut ci = c0;
    let mut sizes = Vec::new();
    for (i, s) in spec.stages.iter().enumerate() {
        hw = walk_stage(&mut w, &format!("down.stage{i}"), &s.blocks, ci, s.out_channels, s.entry_stride, s.num_heads, hw, &sc)?;
        sizes.push(hw);
        ci = s.out_channels;
    }
    let last = spec.stages.last().ok_or_else(|| Error::Config("UNet without stages".into()))?;
    hw = walk_stage(&mut w, "middle", &h.middle, ci, ci, 1, last.num_heads, hw, &sc)?;
    let n = spec.stages.len();
    for (i, up) in spec.up_stages.iter().enumerate() {
        let m = n - 1 - i;
        let c = up.out_channels;
        let prefix = format!("up.stage{i}");
        if h.skip == SkipMode::Concat {
            w.conv(format!("{prefix}.fuse"), 2 * c, c, 1, 1, true, hw);
        }
        hw = walk_stage(&mut w, &prefix, &up.blocks, c, c, 1, up.num_heads, hw, &sc)?;
        if m > 0 {
            if spec.stages[m].entry_stride == 2 {
                hw = sizes[m - 1];
            }
            hw = w.conv(format!("{prefix}.out"), c, spec.stages[m - 1].out_channels, 3, 1, true, hw);
        }
    }
    w.norm("out.norm".into(), 2 * c0);
    w.conv("out.conv".into(), c0, spec.input_channels, 3, 1, true, hw);
    Ok(w.layers)
}

fn check_resolution(spec: &ArchSpec, res: (usize, usize)) -> Result<()> {
    let f = spec.downsample_factor();
    if res.0 == 0 || res.1 == 0 || res.0 % f != 0 || res.1 % f != 0 {
        return Err(Error::Config(format!(
            "resolution {}x{} is not divisible by the downsampling factor {f}",
            res.0, res.1
        )));
    }
    Ok(())
}

/// Parameter and MAC counts at resolution `res`.
pub fn count_macs(spec: &ArchSpec, res: (usize, usize)) -> Result<CostReport> {
    check_resolution(spec, res)?;
    let per_layer = match spec.kind {
        ArchKind::Classifier => walk_classifier(spec, res)?,
        ArchKind::Unet => walk_unet(spec, res)?,
    };
    Ok(CostReport {
        model: spec.name.clone(),
        resolution: res,
        total_params: per_layer.iter().map(|l| l.params).sum(),
        total_macs: per_layer.iter().map(|l| l.macs).sum(),
        per_layer,
        conventions: CONVENTIONS.iter().map(|s| s.to_string()).collect(),
    })
}

/// Nominal input side of a spec (classifier image size or UNet latent size).
pub fn nominal_resolution(spec: &ArchSpec) -> usize {
    match &spec.head {
        crate::config::HeadSpec::Classifier(h) => h.image_size,
        crate::config::HeadSpec::Unet(h) => h.latent_size,
    }
}

/// Parameter counts; MACs are filled at the nominal resolution.
pub fn count_params(spec: &ArchSpec) -> Result<CostReport> {
    let r = nominal_resolution(spec);
    count_macs(spec, (r, r))
}
