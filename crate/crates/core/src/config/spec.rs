use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::dsl::{parse_layout, render_stage, BlockKind};
use crate::error::{Error, Result};

mod blocks_str {
    use super::*;

    pub fn serialize<S: Serializer>(blocks: &[BlockKind], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&render_stage(blocks))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<BlockKind>, D::Error> {
        let text = String::deserialize(d)?;
        let mut layout = parse_layout(&text).map_err(serde::de::Error::custom)?;
        if layout.len() != 1 {
            return Err(serde::de::Error::custom(format!("`{text}` holds more than one stage")));
        }
        Ok(layout.pop().unwrap())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Classifier,
    Unet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    #[serde(with = "blocks_str")]
    pub blocks: Vec<BlockKind>,
    pub out_channels: usize,
    pub entry_stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<usize>,
}

impl StageSpec {
    pub fn new(blocks: Vec<BlockKind>, out_channels: usize, entry_stride: usize, num_heads: Option<usize>) -> Self {
        StageSpec { blocks, out_channels, entry_stride, num_heads }
    }

    pub fn has_attention(&self) -> bool {
        self.blocks.iter().any(|b| b.is_attention())
    }

    pub fn heads(&self) -> Result<usize> {
        self.num_heads
            .ok_or_else(|| Error::Config(format!("stage with {} channels has T blocks but no head count", self.out_channels)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StemSpec {
    pub out_channels: usize,
    /// Number of 3×3 convolutions; only the first one is strided.
    pub convs: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipMode {
    Concat,
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub embed_dim: usize,
    pub num_classes: usize,
    /// Input side the relative-position tables are sized for.
    pub image_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnetHead {
    #[serde(with = "blocks_str")]
    pub middle: Vec<BlockKind>,
    pub skip: SkipMode,
    pub time_embed_dim: usize,
    pub context_dim: usize,
    /// Nominal context length, used by the cost model.
    pub context_len: usize,
    pub adapter_blocks: usize,
    pub adapter_heads: usize,
    pub qk_norm: bool,
    pub rope: bool,
    /// Nominal latent side, used by the cost model.
    pub latent_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum HeadSpec {
    Classifier(ClassifierHead),
    Unet(UnetHead),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub kind: ArchKind,
    pub input_channels: usize,
    pub stochastic_depth: f64,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub up_stages: Vec<StageSpec>,
    pub head: HeadSpec,
}

pub const CLASSIFIER_HEAD_DIM: usize = 32;

impl ArchSpec {
    pub fn layout(&self) -> Vec<Vec<BlockKind>> {
        self.stages.iter().map(|s| s.blocks.clone()).collect()
    }

    pub fn classifier_head(&self) -> Result<&ClassifierHead> {
        match &self.head {
            HeadSpec::Classifier(h) => Ok(h),
            HeadSpec::Unet(_) => Err(Error::Config(format!("`{}` is not a classifier", self.name))),
        }
    }

    pub fn unet_head(&self) -> Result<&UnetHead> {
        match &self.head {
            HeadSpec::Unet(h) => Ok(h),
            HeadSpec::Classifier(_) => Err(Error::Config(format!("`{}` is not a UNet", self.name))),
        }
    }

    /// Total spatial reduction from input to the last stage.
    pub fn downsample_factor(&self) -> usize {
        let stem = if self.kind == ArchKind::Classifier { self.stem.stride } else { 1 };
        stem * self.stages.iter().map(|s| s.entry_stride).product::<usize>()
    }

    /// Maps plain C/T to their conditioned variants inside UNets and
    /// regenerates the mirrored Up path when it is absent.
    pub fn normalize(mut self) -> ArchSpec {
        if self.kind == ArchKind::Unet {
            for s in self.stages.iter_mut().chain(self.up_stages.iter_mut()) {
                s.blocks = s.blocks.iter().map(|b| b.conditioned()).collect();
            }
            if let HeadSpec::Unet(h) = &mut self.head {
                h.middle = h.middle.iter().map(|b| b.conditioned()).collect();
            }
            if self.up_stages.is_empty() {
                self.up_stages = mirror_stages(&self.stages);
            }
        }
        self
    }

    /// Replaces the per-stage block strings, keeping widths and strides.
    pub fn with_layout(&self, layout: &[Vec<BlockKind>]) -> Result<ArchSpec> {
        if layout.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "layout has {} stages, `{}` has {}",
                layout.len(),
                self.name,
                self.stages.len()
            )));
        }
        let mut spec = self.clone();
        for (stage, blocks) in spec.stages.iter_mut().zip(layout) {
            stage.blocks = blocks.clone();
            if stage.num_heads.is_none() && blocks.iter().any(|b| b.is_attention()) {
                stage.num_heads = Some((stage.out_channels / CLASSIFIER_HEAD_DIM).max(1));
            }
        }
        spec.up_stages.clear();
        Ok(spec.normalize())
    }
}

/// Up stages as the reversed reflection of the Down stages.
pub fn mirror_stages(down: &[StageSpec]) -> Vec<StageSpec> {
    down.iter()
        .rev()
        .map(|s| StageSpec {
            blocks: s.blocks.iter().rev().copied().collect(),
            out_channels: s.out_channels,
            entry_stride: s.entry_stride,
            num_heads: s.num_heads,
        })
        .collect()
}
