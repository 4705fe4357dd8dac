mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ASCAN_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "ascan", version, about = "Asymmetric convolution-attention networks: counts, training, sampling, benchmarks")]
pub struct Cli {
    /// Output directory (default: $ASCAN_OUT_DIR/<command>, else runs/<command>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print parameter and MAC counts for an architecture.
    Summarize(SummarizeArgs),
    /// Measure inference throughput over batch sizes.
    Bench(BenchArgs),
    /// Train a classifier.
    TrainCls(TrainClsArgs),
    /// Train a diffusion UNet on synthetic latents with a scaled curriculum stage.
    TrainDiff(TrainDiffArgs),
    /// Draw samples from a trained diffusion checkpoint.
    Sample(SampleArgs),
    /// Run the property suites; exits 1 if any check fails.
    Check(CheckArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SpecArgs {
    /// Built-in preset name.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// TOML architecture file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Block layout such as CC-CCCT-CCTT-CTTT; overrides the preset's layout.
    #[arg(long)]
    pub layout: Option<String>,
}

#[derive(Args, Debug)]
pub struct SummarizeArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Input side (or HxW); defaults to the architecture's nominal size.
    #[arg(long)]
    pub resolution: Option<String>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    /// Include one row per layer.
    #[arg(long)]
    pub per_layer: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> ascan_core::DType {
        match self {
            Precision::F32 => ascan_core::DType::F32,
            Precision::F64 => ascan_core::DType::F64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Preset names, comma separated; several presets add a MACs-vs-throughput comparison.
    #[arg(long, value_delimiter = ',', default_value = "toy-cls")]
    pub preset: Vec<String>,
    /// Input side (or HxW); defaults to each architecture's nominal size.
    #[arg(long)]
    pub resolution: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,16,64")]
    pub batches: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum RecipeKind {
    /// Scaled-down recipe for small synthetic data.
    Toy,
    /// Full ImageNet-scale recipe.
    Full,
}

#[derive(Args, Debug)]
pub struct TrainClsArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Dataset directory (index.json plus .bin files); a synthetic two-blob set otherwise.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Epochs; 0 writes the initial checkpoint only.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum, default_value_t = RecipeKind::Toy)]
    pub recipe: RecipeKind,
    /// Size of the synthetic dataset.
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Args, Debug)]
pub struct TrainDiffArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Curriculum stage: s256, s512, s1024 or multi-aspect.
    #[arg(long, default_value = "s256")]
    pub stage: String,
    /// Divides resolution by N and batch size and iterations by N².
    #[arg(long, default_value_t = 16)]
    pub toy_scale: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the scaled iteration count.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Overrides the scaled batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Number of synthetic classes.
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum GuidanceArg {
    /// Increasing scale 1.1 to 3.6 over steps 5..=30, 1 elsewhere.
    Sampled,
    /// The same scale at every step.
    Constant,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum SamplerArg {
    Ddpm,
    Heun,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Checkpoint written by train-diff.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = GuidanceArg::Sampled)]
    pub guidance: GuidanceArg,
    /// Guidance scale; only with --guidance constant.
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long, value_enum, default_value_t = SamplerArg::Ddpm)]
    pub sampler: SamplerArg,
    /// Number of samples (default 4, or one per label).
    #[arg(long)]
    pub n: Option<usize>,
    /// Class labels, comma separated; cycles through all classes otherwise.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    /// Finite-difference gradient checks of primitives, blocks and a UNet.
    #[arg(long)]
    pub grad: bool,
    /// Published parameter/MAC reconciliation and registry equality.
    #[arg(long)]
    pub counts: bool,
    /// Noise schedule, guidance and sampler-order identities.
    #[arg(long)]
    pub schedule: bool,
    /// RoPE and QK-norm properties.
    #[arg(long)]
    pub rope: bool,
    #[arg(long)]
    pub json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
