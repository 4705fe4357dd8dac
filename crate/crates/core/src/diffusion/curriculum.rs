use serde::{Deserialize, Serialize};

use super::schedule::beta_end_for_resolution;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumStage {
    S256,
    S512,
    S1024,
    MultiAspect,
}

impl std::str::FromStr for CurriculumStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s256" => Ok(CurriculumStage::S256),
            "s512" => Ok(CurriculumStage::S512),
            "s1024" => Ok(CurriculumStage::S1024),
            "multi_aspect" | "multi-aspect" => Ok(CurriculumStage::MultiAspect),
            _ => Err(Error::Config(format!("unknown curriculum stage `{s}`"))),
        }
    }
}

/// Training settings of one resolution stage. Iteration count and batch
/// size are unknown for the multi-aspect stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecipe {
    pub stage: CurriculumStage,
    pub resolution: usize,
    pub iterations: Option<u64>,
    pub batch_size: Option<u64>,
    pub lr: f64,
    pub beta_end: f64,
    pub offset_noise: f64,
    pub betas: (f64, f64),
}

pub fn curriculum_config(stage: CurriculumStage) -> StageRecipe {
    let (resolution, iterations, batch, lr) = match stage {
        CurriculumStage::S256 => (256, Some(300_000), Some(16_384), 4e-4),
        CurriculumStage::S512 => (512, Some(200_000), Some(6_144), 1e-4),
        CurriculumStage::S1024 => (1024, Some(100_000), Some(1_536), 5e-5),
        CurriculumStage::MultiAspect => (1024, None, None, 5e-5),
    };
    StageRecipe {
        stage,
        resolution,
        iterations,
        batch_size: batch,
        lr,
        beta_end: beta_end_for_resolution(resolution),
        offset_noise: if stage == CurriculumStage::MultiAspect { 0.05 } else { 0.0 },
        betas: (0.9, 0.99),
    }
}

impl StageRecipe {
    /// Desk-scale version: resolution divided by `divisor`, batch size and
    /// iterations by `divisor²` (at least 1), learning rate and noise
    /// settings unchanged.
    pub fn scaled(&self, divisor: usize) -> Result<StageRecipe> {
        if divisor == 0 || self.resolution % divisor != 0 {
            return Err(Error::Config(format!("toy divisor {divisor} does not divide {}", self.resolution)));
        }
        let d2 = (divisor * divisor) as u64;
        Ok(StageRecipe {
            resolution: self.resolution / divisor,
            iterations: self.iterations.map(|i| (i / d2).max(1)),
            batch_size: self.batch_size.map(|b| (b / d2).max(1)),
            ..self.clone()
        })
    }
}
