use std::sync::Arc;

use super::layers::{LayerNorm, Linear};
use super::{drop_path, ForwardCtx};
use crate::error::{Error, Result};
use crate::param::{Builder, Init, Param};
use crate::tensor::{self, Tensor};

pub const MLP_RATIO: usize = 4;
pub const ROPE_BASE: f64 = 10_000.0;
pub const QK_NORM_EPS: f64 = 1e-6;

/// `(N, d, H, W)` to `(N, H·W, d)`.
pub fn map_to_tokens(x: &Tensor) -> Result<Tensor> {
    let [n, d, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    x.reshape(&[n, d, h * w])?.permute(&[0, 2, 1])
}

/// `(N, H·W, d)` back to `(N, d, H, W)`.
pub fn tokens_to_map(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, d) = (x.dim(0), x.dim(2));
    x.permute(&[0, 2, 1])?.reshape(&[n, d, h, w])
}

/// `(N, L, heads·dh)` to `(N, heads, L, dh)`.
fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, l, d) = (x.dim(0), x.dim(1), x.dim(2));
    x.reshape(&[n, l, heads, d / heads])?.permute(&[0, 2, 1, 3])
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (n, h, l, dh) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    x.permute(&[0, 2, 1, 3])?.reshape(&[n, l, h * dh])
}

/// Learned per-head bias indexed by the clamped 2-d token offset.
#[derive(Clone, Debug)]
pub struct RelPosBias {
    pub table: Param,
    pub grid: usize,
}

impl RelPosBias {
    pub fn new(b: &Builder, heads: usize, grid: usize) -> Result<RelPosBias> {
        let side = 2 * grid - 1;
        Ok(RelPosBias { table: b.param("table", &[heads, side * side], Init::TruncNormal(0.02))?, grid })
    }

    pub fn index(&self, h: usize, w: usize) -> Vec<usize> {
        let g = self.grid as isize;
        let side = 2 * g - 1;
        let l = h * w;
        let mut idx = Vec::with_capacity(l * l);
        for i in 0..l {
            let (ri, ci) = ((i / w) as isize, (i % w) as isize);
            for j in 0..l {
                let (rj, cj) = ((j / w) as isize, (j % w) as isize);
                let dy = (ri - rj).clamp(-(g - 1), g - 1) + g - 1;
                let dx = (ci - cj).clamp(-(g - 1), g - 1) + g - 1;
                idx.push((dy * side + dx) as usize);
            }
        }
        idx
    }

    /// Bias of shape `(1, heads, L, L)`.
    pub fn bias(&self, h: usize, w: usize) -> Result<Tensor> {
        let t = self.table.value();
        let heads = t.dim(0);
        let l = h * w;
        t.gather_last(Arc::new(self.index(h, w)))?.reshape(&[1, heads, l, l])
    }
}

/// RMS gains applied to per-head queries and keys.
#[derive(Clone, Debug)]
pub struct QkNorm {
    pub q: Param,
    pub k: Param,
}

impl QkNorm {
    pub fn new(b: &Builder, head_dim: usize) -> Result<QkNorm> {
        Ok(QkNorm { q: b.param("q", &[head_dim], Init::Ones)?, k: b.param("k", &[head_dim], Init::Ones)? })
    }

    pub fn apply(&self, q: &Tensor, k: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((
            tensor::rms_norm(q, Some(&self.q.value()), QK_NORM_EPS)?,
            tensor::rms_norm(k, Some(&self.k.value()), QK_NORM_EPS)?,
        ))
    }
}

/// Image-token queries attending to context keys/values.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub kv: Linear,
    pub out: Linear,
    pub qk_norm: Option<QkNorm>,
}

#[derive(Clone, Debug)]
pub struct TBlockConfig {
    pub dim: usize,
    pub heads: usize,
    /// Token-grid side for the relative-position table, if any.
    pub rel_pos_grid: Option<usize>,
    pub rope: bool,
    pub qk_norm: bool,
    pub context_dim: Option<usize>,
    pub drop_rate: f64,
}

impl TBlockConfig {
    pub fn plain(dim: usize, heads: usize) -> TBlockConfig {
        TBlockConfig { dim, heads, rel_pos_grid: None, rope: false, qk_norm: false, context_dim: None, drop_rate: 0.0 }
    }
}

/// Parallel transformer block: `Y = X + Attn(X̂) [+ Cross(X̂, c)] + MLP(X̂)`
/// with `X̂ = LN(GeLU(X))`.
#[derive(Clone, Debug)]
pub struct TBlock {
    pub dim: usize,
    pub heads: usize,
    pub norm: LayerNorm,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub pos: Option<RelPosBias>,
    pub rope: bool,
    pub qk_norm: Option<QkNorm>,
    pub cross: Option<CrossAttention>,
    pub drop_rate: f64,
}

impl TBlock {
    pub fn new(b: &Builder, cfg: &TBlockConfig) -> Result<TBlock> {
        let d = cfg.dim;
        if cfg.heads == 0 || d % cfg.heads != 0 {
            return Err(Error::Config(format!("dim {d} is not divisible by {} heads", cfg.heads)));
        }
        let dh = d / cfg.heads;
        if cfg.rope && dh % 4 != 0 {
            return Err(Error::Config(format!("RoPE needs a head dim divisible by 4, got {dh}")));
        }
        let cross = match cfg.context_dim {
            Some(cd) => {
                let cb = b.pp("cross");
                Some(CrossAttention {
                    q: Linear::new(&cb.pp("q"), d, d, true)?,
                    kv: Linear::new(&cb.pp("kv"), cd, 2 * d, true)?,
                    out: Linear::new(&cb.pp("out"), d, d, true)?,
                    qk_norm: if cfg.qk_norm { Some(QkNorm::new(&cb.pp("qk_norm"), dh)?) } else { None },
                })
            }
            None => None,
        };
        Ok(TBlock {
            dim: d,
            heads: cfg.heads,
            norm: LayerNorm::new(&b.pp("norm"), d)?,
            qkv: Linear::new(&b.pp("qkv"), d, 3 * d, true)?,
            attn_out: Linear::new(&b.pp("attn_out"), d, d, true)?,
            mlp_in: Linear::new(&b.pp("mlp_in"), d, MLP_RATIO * d, true)?,
            mlp_out: Linear::new(&b.pp("mlp_out"), MLP_RATIO * d, d, true)?,
            pos: cfg.rel_pos_grid.map(|g| RelPosBias::new(&b.pp("pos"), cfg.heads, g)).transpose()?,
            rope: cfg.rope,
            qk_norm: if cfg.qk_norm { Some(QkNorm::new(&b.pp("qk_norm"), dh)?) } else { None },
            cross,
            drop_rate: cfg.drop_rate,
        })
    }

    /// Accepts a map `(N, d, H, W)` or a sequence `(N, L, d)`; the output
    /// has the input's shape.
    pub fn forward(&self, x: &Tensor, context: Option<&Tensor>, ctx: &ForwardCtx) -> Result<Tensor> {
        match x.rank() {
            4 => {
                if x.dim(1) != self.dim {
                    return Err(Error::shape("t_block", format!("expected {} channels, got {:?}", self.dim, x.shape())));
                }
                let (h, w) = (x.dim(2), x.dim(3));
                let y = self.forward_tokens(&map_to_tokens(x)?, (h, w), context, ctx)?;
                tokens_to_map(&y, h, w)
            }
            3 => {
                if x.dim(2) != self.dim {
                    return Err(Error::shape("t_block", format!("expected width {}, got {:?}", self.dim, x.shape())));
                }
                self.forward_tokens(x, (1, x.dim(1)), context, ctx)
            }
            _ => Err(Error::shape("t_block", format!("expected a map or a sequence, got {:?}", x.shape()))),
        }
    }

    /// Self-attention queries/keys after QK normalisation and RoPE, with values.
    pub fn self_qkv(&self, xh: &Tensor, grid: (usize, usize)) -> Result<(Tensor, Tensor, Tensor)> {
        let d = self.dim;
        let qkv = self.qkv.forward(xh)?;
        let q = split_heads(&qkv.narrow(2, 0, d)?, self.heads)?;
        let k = split_heads(&qkv.narrow(2, d, d)?, self.heads)?;
        let v = split_heads(&qkv.narrow(2, 2 * d, d)?, self.heads)?;
        let (q, k) = match &self.qk_norm {
            Some(n) => n.apply(&q, &k)?,
            None => (q, k),
        };
        if self.rope {
            let pos: Vec<(usize, usize)> = (0..grid.0 * grid.1).map(|i| (i / grid.1, i % grid.1)).collect();
            Ok((tensor::rope_2d(&q, &pos, ROPE_BASE)?, tensor::rope_2d(&k, &pos, ROPE_BASE)?, v))
        } else {
            Ok((q, k, v))
        }
    }

    /// The normalised input shared by every branch.
    pub fn shared_input(&self, x: &Tensor) -> Result<Tensor> {
        self.norm.forward(&tensor::gelu(x))
    }

    pub fn forward_tokens(
        &self,
        x: &Tensor,
        grid: (usize, usize),
        context: Option<&Tensor>,
        ctx: &ForwardCtx,
    ) -> Result<Tensor> {
        let xh = self.shared_input(x)?;
        let (q, k, v) = self.self_qkv(&xh, grid)?;
        let bias = match &self.pos {
            Some(p) => Some(p.bias(grid.0, grid.1)?),
            None => None,
        };
        let attn = tensor::attention(&q, &k, &v, bias.as_ref())?;
        let mut branch = self.attn_out.forward(&merge_heads(&attn)?)?;
        if let Some(cross) = &self.cross {
            let c = context.ok_or_else(|| Error::invalid("conditioned T block needs a context sequence"))?;
            branch = branch.add(&self.cross_attention(cross, &xh, c)?)?;
        }
        let mlp = self.mlp_out.forward(&tensor::gelu(&self.mlp_in.forward(&xh)?))?;
        let branch = drop_path(&branch.add(&mlp)?, self.drop_rate, ctx)?;
        x.add(&branch)
    }

    fn cross_attention(&self, cross: &CrossAttention, xh: &Tensor, context: &Tensor) -> Result<Tensor> {
        if context.rank() != 3 || context.dim(0) != xh.dim(0) {
            return Err(Error::shape(
                "cross_attention",
                format!("context must be (N, S, dim) with N = {}, got {:?}", xh.dim(0), context.shape()),
            ));
        }
        let d = self.dim;
        let q = split_heads(&cross.q.forward(xh)?, self.heads)?;
        let kv = cross.kv.forward(context)?;
        let k = split_heads(&kv.narrow(2, 0, d)?, self.heads)?;
        let v = split_heads(&kv.narrow(2, d, d)?, self.heads)?;
        let (q, k) = match &cross.qk_norm {
            Some(n) => n.apply(&q, &k)?,
            None => (q, k),
        };
        cross.out.forward(&merge_heads(&tensor::attention(&q, &k, &v, None)?)?)
    }
}
