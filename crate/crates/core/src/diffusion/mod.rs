//! Latent diffusion: schedules, the asymmetric UNet, the noise-prediction
//! objective and samplers.

mod curriculum;
mod guidance;
mod image;
mod loss;
mod sample;
mod schedule;
mod toy;
mod train;
mod unet;

pub use curriculum::{curriculum_config, CurriculumStage, StageRecipe};
pub use guidance::{cfg_combine, guidance_at, GuidanceMode, GuidanceSchedule};
pub use image::{write_png, write_raw};
pub use loss::{diffusion_loss, LossConfig};
pub use sample::{heun_integrate, respace, sample_ddpm, sample_heun};
pub use schedule::{add_offset_noise, beta_end_for_resolution, make_schedule, NoiseSchedule, ScheduleKind};
pub use toy::{as_latents, empirical_second_moments, eval_loss, train_gmm, Gmm2d, ToyConfig, ToyReport, ZeroPredictor};
pub use train::{train_diffusion, DiffStep, DiffTrainConfig, PatternLatents};
pub use unet::{synthetic_context, ClassTokens, Conditioning, NoisePredictor, SkipHook, UNet, UpStage};
