use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{build_stage, BatchNorm2d, Conv2d, ForwardCtx, StageBlock, StageOptions, TBlock, TBlockConfig, TimeEmbed};
use crate::config::{ArchKind, ArchSpec, SkipMode, UnetHead};
use crate::error::{Error, Result};
use crate::param::{Builder, Init, Param, ParamStore};
use crate::tensor::{self, no_grad, DType, Tensor};

/// What the denoiser is conditioned on for one batch.
#[derive(Clone, Debug)]
pub enum Conditioning {
    /// Context tokens `(N, S, context_dim)`.
    Context(Tensor),
    /// The learned null token repeated `len` times for every sample.
    Null { len: usize },
    /// `context` with the samples flagged in `drop` replaced by the null token.
    Mixed { context: Tensor, drop: Vec<bool> },
}

/// An ε-prediction model.
pub trait NoisePredictor {
    fn predict_with(&self, z_t: &Tensor, t: &[f64], cond: &Conditioning, ctx: &ForwardCtx) -> Result<Tensor>;

    /// Eval-mode prediction without gradient recording.
    fn predict(&self, z_t: &Tensor, t: &[f64], cond: &Conditioning) -> Result<Tensor> {
        no_grad(|| self.predict_with(z_t, t, cond, &ForwardCtx::eval()))
    }
}

#[derive(Clone, Debug)]
pub struct UpStage {
    pub fuse: Option<Conv2d>,
    pub blocks: Vec<StageBlock>,
    pub upsample: bool,
    pub out: Option<Conv2d>,
}

/// Down / Middle / Up denoiser with time embedding and a context adapter.
pub struct UNet {
    pub spec: ArchSpec,
    pub time_embed: TimeEmbed,
    pub adapter: Vec<TBlock>,
    pub null_context: Param,
    pub conv_in: Conv2d,
    pub down: Vec<Vec<StageBlock>>,
    pub middle: Vec<StageBlock>,
    pub up: Vec<UpStage>,
    pub out_norm: BatchNorm2d,
    pub out_conv: Conv2d,
    store: ParamStore,
}

/// Modifies the skip tensor taken from down stage `i` before an up stage
/// consumes it.
pub type SkipHook<'a> = &'a dyn Fn(usize, Tensor) -> Result<Tensor>;

impl UNet {
    pub fn build(spec: &ArchSpec, b: &Builder) -> Result<UNet> {
        if spec.kind != ArchKind::Unet {
            return Err(Error::Config(format!("`{}` is not a UNet spec", spec.name)));
        }
        let h = spec.unet_head()?;
        if spec.up_stages.len() != spec.stages.len() {
            return Err(Error::Config("mirror violation: up and down stage counts differ".into()));
        }
        let c0 = spec.stem.out_channels;
        let opts = StageOptions {
            time_dim: Some(h.time_embed_dim),
            rel_pos_grid: None,
            rope: h.rope,
            qk_norm: h.qk_norm,
            context_dim: Some(h.context_dim),
        };
        let time_embed = TimeEmbed::new(&b.pp("time_embed"), c0, h.time_embed_dim)?;
        let adapter = (0..h.adapter_blocks)
            .map(|i| TBlock::new(&b.pp(format!("adapter.block{i}")), &TBlockConfig::plain(h.context_dim, h.adapter_heads)))
            .collect::<Result<Vec<_>>>()?;
        let null_context = b.param("null_context", &[h.context_dim], Init::TruncNormal(0.02))?;
        let conv_in = Conv2d::new(&b.pp("conv_in"), spec.input_channels, c0, 3, 1, true)?;
        let mut down = Vec::with_capacity(spec.stages.len());
        let mut cin = c0;
        for (i, s) in spec.stages.iter().enumerate() {
            let rates = vec![0.0; s.blocks.len()];
            down.push(build_stage(
                &b.pp(format!("down.stage{i}")),
                &s.blocks,
                cin,
                s.out_channels,
                s.entry_stride,
                s.num_heads,
                &opts,
                &rates,
            )?);
            cin = s.out_channels;
        }
        let last = spec.stages.last().ok_or_else(|| Error::Config("UNet without stages".into()))?;
        let middle = build_stage(&b.pp("middle"), &h.middle, cin, cin, 1, last.num_heads, &opts, &[])?;
        let n = spec.stages.len();
        let mut up = Vec::with_capacity(n);
        for (i, s) in spec.up_stages.iter().enumerate() {
            let m = n - 1 - i;
            let c = s.out_channels;
            if c != spec.stages[m].out_channels {
                return Err(Error::Config(format!("mirror violation: up stage {i} has {c} channels")));
            }
            let ub = b.pp(format!("up.stage{i}"));
            let fuse = match h.skip {
                SkipMode::Concat => Some(Conv2d::new(&ub.pp("fuse"), 2 * c, c, 1, 1, true)?),
                SkipMode::Add => None,
            };
            let blocks = build_stage(&ub, &s.blocks, c, c, 1, s.num_heads, &opts, &[])?;
            let (upsample, out) = if m > 0 {
                let prev = spec.stages[m - 1].out_channels;
                (spec.stages[m].entry_stride == 2, Some(Conv2d::new(&ub.pp("out"), c, prev, 3, 1, true)?))
            } else {
                (false, None)
            };
            up.push(UpStage { fuse, blocks, upsample, out });
        }
        let out_norm = BatchNorm2d::new(&b.pp("out.norm"), c0)?;
        let out_conv = Conv2d::new(&b.pp("out.conv"), c0, spec.input_channels, 3, 1, true)?;
        Ok(UNet {
            spec: spec.clone(),
            time_embed,
            adapter,
            null_context,
            conv_in,
            down,
            middle,
            up,
            out_norm,
            out_conv,
            store: b.store().clone(),
        })
    }

    pub fn new(spec: &ArchSpec, seed: u64, dtype: DType) -> Result<UNet> {
        UNet::build(spec, &Builder::new(seed, dtype))
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn head(&self) -> &UnetHead {
        self.spec.unet_head().expect("UNet built from a UNet spec")
    }

    fn dtype(&self) -> DType {
        self.conv_in.weight.dtype()
    }

    /// Context tokens after null substitution, before the adapter.
    pub fn resolve_context(&self, n: usize, cond: &Conditioning) -> Result<Tensor> {
        let cd = self.head().context_dim;
        let null = |len: usize| self.null_context.value().reshape(&[1, 1, cd])?.expand(&[n, len, cd]);
        let check = |c: &Tensor| -> Result<()> {
            if c.rank() != 3 || c.dim(0) != n || c.dim(2) != cd || c.dim(1) == 0 {
                return Err(Error::shape("unet", format!("context must be ({n}, S>=1, {cd}), got {:?}", c.shape())));
            }
            Ok(())
        };
        match cond {
            Conditioning::Context(c) => {
                check(c)?;
                Ok(c.clone())
            }
            Conditioning::Null { len } => {
                if *len == 0 {
                    return Err(Error::invalid("null conditioning needs at least one token"));
                }
                null(*len)
            }
            Conditioning::Mixed { context, drop } => {
                check(context)?;
                if drop.len() != n {
                    return Err(Error::shape("unet", format!("{} drop flags for batch {n}", drop.len())));
                }
                let keep: Vec<f64> = drop.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
                let gone: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
                let keep = Tensor::from_vec(keep, &[n, 1, 1], self.dtype())?;
                let gone = Tensor::from_vec(gone, &[n, 1, 1], self.dtype())?;
                context.mul(&keep)?.add(&null(context.dim(1))?.mul(&gone)?)
            }
        }
    }

    /// Full forward; `skip_hook` may rewrite each skip tensor.
    pub fn forward_traced(
        &self,
        z: &Tensor,
        t: &[f64],
        cond: &Conditioning,
        ctx: &ForwardCtx,
        skip_hook: Option<SkipHook<'_>>,
    ) -> Result<Tensor> {
        let f = self.spec.downsample_factor();
        if z.rank() != 4 || z.dim(1) != self.spec.input_channels {
            return Err(Error::shape("unet", format!("expected (N, {}, H, W), got {:?}", self.spec.input_channels, z.shape())));
        }
        if z.dim(2) % f != 0 || z.dim(3) % f != 0 {
            return Err(Error::shape("unet", format!("latent {}x{} is not divisible by {f}", z.dim(2), z.dim(3))));
        }
        let n = z.dim(0);
        if t.len() != n {
            return Err(Error::shape("unet", format!("{} timesteps for batch {n}", t.len())));
        }
        let temb = self.time_embed.forward(t, self.dtype())?;
        let mut context = self.resolve_context(n, cond)?;
        for block in &self.adapter {
            context = block.forward(&context, None, ctx)?;
        }
        let run = |blocks: &[StageBlock], mut h: Tensor| -> Result<Tensor> {
            for block in blocks {
                h = block.forward(&h, Some(&temb), Some(&context), ctx)?;
            }
            Ok(h)
        };
        let mut h = self.conv_in.forward(z)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for stage in &self.down {
            h = run(stage, h)?;
            skips.push(h.clone());
        }
        h = run(&self.middle, h)?;
        let n_stages = self.down.len();
        for (i, stage) in self.up.iter().enumerate() {
            let m = n_stages - 1 - i;
            let mut skip = skips[m].clone();
            if let Some(hook) = skip_hook {
                skip = hook(m, skip)?;
            }
            h = match &stage.fuse {
                Some(fuse) => fuse.forward(&Tensor::concat(&[h, skip], 1)?)?,
                None => h.add(&skip)?,
            };
            h = run(&stage.blocks, h)?;
            if stage.upsample {
                h = tensor::upsample_nearest2x(&h)?;
            }
            if let Some(out) = &stage.out {
                h = out.forward(&h)?;
            }
        }
        let h = tensor::gelu(&self.out_norm.forward(&h, ctx)?);
        self.out_conv.forward(&h)
    }
}

impl NoisePredictor for UNet {
    fn predict_with(&self, z_t: &Tensor, t: &[f64], cond: &Conditioning, ctx: &ForwardCtx) -> Result<Tensor> {
        self.forward_traced(z_t, t, cond, ctx, None)
    }
}

/// Frozen stand-in for encoder outputs: one seeded Gaussian token per class.
#[derive(Clone, Debug)]
pub struct ClassTokens {
    pub dim: usize,
    table: Vec<Vec<f64>>,
}

impl ClassTokens {
    pub fn new(num_classes: usize, dim: usize, seed: u64) -> Result<ClassTokens> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..num_classes)
            .map(|_| Tensor::randn(&[dim], 1.0, DType::F64, &mut rng).map(|t| t.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassTokens { dim, table })
    }

    pub fn num_classes(&self) -> usize {
        self.table.len()
    }

    /// Context `(N, 1, dim)` for the given labels.
    pub fn context(&self, labels: &[usize], dtype: DType) -> Result<Tensor> {
        let mut data = Vec::with_capacity(labels.len() * self.dim);
        for &l in labels {
            let row = self.table.get(l).ok_or_else(|| Error::invalid(format!("class {l} out of range")))?;
            data.extend_from_slice(row);
        }
        Tensor::from_vec(data, &[labels.len(), 1, self.dim], dtype)
    }
}

/// Seeded Gaussian token sequences `(n, len, dim)` standing in for text
/// encoder outputs.
pub fn synthetic_context(n: usize, len: usize, dim: usize, seed: u64, dtype: DType) -> Result<Tensor> {
    Tensor::randn(&[n, len, dim], 1.0, dtype, &mut ChaCha8Rng::seed_from_u64(seed))
}
