use crate::blocks::{build_stage, drop_schedule, is_transition, ClassifierHeadLayer, ForwardCtx, StageBlock, StageOptions, Stem};
use crate::config::{ArchKind, ArchSpec, HeadSpec};
use crate::error::{Error, Result};
use crate::param::{Builder, ParamStore};
use crate::tensor::{DType, Tensor};

/// Executable classifier assembled from an [`ArchSpec`].
pub struct Classifier {
    pub spec: ArchSpec,
    pub stem: Stem,
    pub stages: Vec<Vec<StageBlock>>,
    pub head: ClassifierHeadLayer,
    store: ParamStore,
}

impl Classifier {
    /// Builds under `b`; with a meta builder only shapes are recorded.
    pub fn build(spec: &ArchSpec, b: &Builder) -> Result<Classifier> {
        if spec.kind != ArchKind::Classifier {
            return Err(Error::Config(format!("`{}` is not a classifier spec", spec.name)));
        }
        let head = spec.classifier_head()?;
        let stem = Stem::new(&b.pp("stem"), spec.input_channels, spec.stem.out_channels, spec.stem.convs, spec.stem.stride)?;
        let residual: usize = {
            let mut ci = spec.stem.out_channels;
            let mut count = 0;
            for s in &spec.stages {
                for (j, &k) in s.blocks.iter().enumerate() {
                    if !is_transition(k, j, ci, s.out_channels, s.entry_stride) {
                        count += 1;
                    }
                    ci = s.out_channels;
                }
            }
            count
        };
        let rates = drop_schedule(residual, spec.stochastic_depth);
        let mut next_rate = 0;
        let mut stages = Vec::with_capacity(spec.stages.len());
        let mut cin = spec.stem.out_channels;
        let mut reduction = spec.stem.stride;
        for (i, s) in spec.stages.iter().enumerate() {
            reduction *= s.entry_stride;
            let grid = (head.image_size / reduction).max(1);
            let mut stage_rates = Vec::with_capacity(s.blocks.len());
            let mut ci = cin;
            for (j, &k) in s.blocks.iter().enumerate() {
                if is_transition(k, j, ci, s.out_channels, s.entry_stride) {
                    stage_rates.push(0.0);
                } else {
                    stage_rates.push(rates[next_rate]);
                    next_rate += 1;
                }
                ci = s.out_channels;
            }
            let opts = StageOptions { rel_pos_grid: Some(grid), ..Default::default() };
            stages.push(build_stage(
                &b.pp(format!("stage{i}")),
                &s.blocks,
                cin,
                s.out_channels,
                s.entry_stride,
                s.num_heads,
                &opts,
                &stage_rates,
            )?);
            cin = s.out_channels;
        }
        let head = ClassifierHeadLayer::new(&b.pp("head"), cin, head.embed_dim, head.num_classes)?;
        Ok(Classifier { spec: spec.clone(), stem, stages, head, store: b.store().clone() })
    }

    pub fn new(spec: &ArchSpec, seed: u64, dtype: DType) -> Result<Classifier> {
        Classifier::build(spec, &Builder::new(seed, dtype))
    }

    /// Builds with the head resized to `num_classes`.
    pub fn with_classes(spec: &ArchSpec, num_classes: usize, seed: u64, dtype: DType) -> Result<Classifier> {
        let mut spec = spec.clone();
        match &mut spec.head {
            HeadSpec::Classifier(h) => h.num_classes = num_classes,
            HeadSpec::Unet(_) => return Err(Error::Config(format!("`{}` is not a classifier spec", spec.name))),
        }
        Classifier::new(&spec, seed, dtype)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Feature map after the last stage.
    pub fn features(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let factor = self.spec.downsample_factor();
        if x.rank() != 4 || x.dim(1) != self.spec.input_channels {
            return Err(Error::shape(
                "classifier",
                format!("expected (N, {}, H, W), got {:?}", self.spec.input_channels, x.shape()),
            ));
        }
        if x.dim(2) < factor || x.dim(3) < factor {
            return Err(Error::shape(
                "classifier",
                format!("input {}x{} is smaller than the downsampling factor {factor}", x.dim(2), x.dim(3)),
            ));
        }
        let mut h = self.stem.forward(x, ctx)?;
        for stage in &self.stages {
            for block in stage {
                h = block.forward(&h, None, None, ctx)?;
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        self.head.forward(&self.features(x, ctx)?, ctx)
    }
}
