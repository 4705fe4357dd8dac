use super::cblock::{CBlock, Transition};
use super::tblock::{TBlock, TBlockConfig};
use super::ForwardCtx;
use crate::config::BlockKind;
use crate::error::{Error, Result};
use crate::param::Builder;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum StageBlock {
    C(CBlock),
    T(TBlock),
    /// A T block that opens a stage with a stride or width change is
    /// realised as a pool + 1×1 projection.
    Transition(Transition),
}

impl StageBlock {
    pub fn forward(
        &self,
        x: &Tensor,
        time_embed: Option<&Tensor>,
        context: Option<&Tensor>,
        ctx: &ForwardCtx,
    ) -> Result<Tensor> {
        match self {
            StageBlock::C(b) => b.forward(x, time_embed, ctx),
            StageBlock::T(b) => b.forward(x, context, ctx),
            StageBlock::Transition(t) => t.forward(x),
        }
    }

    pub fn is_residual(&self) -> bool {
        !matches!(self, StageBlock::Transition(_))
    }
}

#[derive(Clone, Debug, Default)]
pub struct StageOptions {
    pub time_dim: Option<usize>,
    pub rel_pos_grid: Option<usize>,
    pub rope: bool,
    pub qk_norm: bool,
    pub context_dim: Option<usize>,
}

/// True when block `j` of a stage becomes a transition layer.
pub fn is_transition(kind: BlockKind, j: usize, cin: usize, cout: usize, stride: usize) -> bool {
    j == 0 && kind.is_attention() && (stride != 1 || cin != cout)
}

/// Builds the blocks of one stage under `b` as `block{j}`. `drop_rates`
/// holds one stochastic-depth rate per block.
#[allow(clippy::too_many_arguments)]
pub fn build_stage(
    b: &Builder,
    kinds: &[BlockKind],
    cin: usize,
    cout: usize,
    stride: usize,
    heads: Option<usize>,
    opts: &StageOptions,
    drop_rates: &[f64],
) -> Result<Vec<StageBlock>> {
    let mut blocks = Vec::with_capacity(kinds.len());
    let mut ci = cin;
    for (j, &kind) in kinds.iter().enumerate() {
        let bb = b.pp(format!("block{j}"));
        let s = if j == 0 { stride } else { 1 };
        let rate = drop_rates.get(j).copied().unwrap_or(0.0);
        let block = if is_transition(kind, j, ci, cout, s) {
            StageBlock::Transition(Transition::new(&bb.pp("shortcut"), ci, cout, s)?)
        } else if kind.is_conv() {
            let time = if kind.is_conditioned() { opts.time_dim } else { None };
            StageBlock::C(CBlock::new(&bb, ci, cout, s, time, rate)?)
        } else {
            let heads = heads.ok_or_else(|| Error::Config(format!("T block at {cout} channels needs a head count")))?;
            let cond = kind.is_conditioned();
            StageBlock::T(TBlock::new(
                &bb,
                &TBlockConfig {
                    dim: cout,
                    heads,
                    rel_pos_grid: if cond { None } else { opts.rel_pos_grid },
                    rope: cond && opts.rope,
                    qk_norm: cond && opts.qk_norm,
                    context_dim: if cond { opts.context_dim } else { None },
                    drop_rate: rate,
                },
            )?)
        };
        blocks.push(block);
        ci = cout;
    }
    Ok(blocks)
}

/// Linearly increasing stochastic-depth rates over `n` blocks, ending at `max`.
pub fn drop_schedule(n: usize, max: f64) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0; n];
    }
    (0..n).map(|i| max * i as f64 / (n - 1) as f64).collect()
}
