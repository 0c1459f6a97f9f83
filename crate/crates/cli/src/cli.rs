use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use swapflow::conditioning::ConditioningMode;
use swapflow::degradation::DegradationSpec;
use swapflow::evaluation::InversionMode;
use swapflow::synthdata::Split;

#[derive(Debug, Parser)]
#[command(name = "swapflow", version, about = "Synthetic face-swapping pipeline")]
pub struct Cli {
    /// Experiment root; relative paths in other flags resolve against it.
    #[arg(long, global = true, env = "SWAPFLOW_EXP_ROOT", default_value = ".")]
    pub exp_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic face dataset.
    GenData(GenData),
    /// Train the frozen identity encoder.
    TrainIdEncoder(TrainIdEncoder),
    /// Train the frozen attribute probe used by evaluation.
    TrainProbes(TrainProbes),
    /// Train a two-phase teacher.
    TrainTeacher(TrainTeacher),
    /// Distil a student from a pseudo-triplet store.
    TrainStudent(TrainStudent),
    /// Generate pseudo-triplets with a trained teacher.
    BuildTriplets(BuildTriplets),
    /// Swap the identity of one image onto another.
    Swap(Swap),
    /// Invert an image into initial noise.
    Invert(Invert),
    /// Run the evaluation protocol.
    Eval(Eval),
    /// Train and evaluate one teacher per degradation setting.
    AblateDegradation(AblateDegradation),
    /// PCA diagnostics of inverted noise.
    AnalyzeNoise(AnalyzeNoise),
    /// Run the multi-seed trend benchmark.
    Benchmark(Benchmark),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct Instruments {
    /// Identity encoder checkpoint.
    #[arg(long, default_value = "checkpoints/encoder.safetensors")]
    pub encoder: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long, default_value_t = 40)]
    pub identities: u32,
    #[arg(long, default_value_t = 8)]
    pub per_identity: u32,
    #[arg(long, default_value_t = 64)]
    pub res: usize,
    #[arg(long, default_value = "train")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainIdEncoder {
    #[arg(long, default_value = "datasets/train")]
    pub data: PathBuf,
    #[arg(long, default_value = "checkpoints/encoder.safetensors")]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Validation top-1 accuracy below which training fails.
    #[arg(long)]
    pub min_accuracy: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainProbes {
    #[arg(long, default_value = "checkpoints/probe.safetensors")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub res: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Held-out R² below which training fails.
    #[arg(long, allow_hyphen_values = true)]
    pub min_r2: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainTeacher {
    /// TOML file with teacher settings; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "datasets/train")]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub instruments: Instruments,
    /// Continue from the latest checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainStudent {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Teacher run directory or checkpoint.
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub triplets: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub instruments: Instruments,
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Enable the perceptual loss on occluded triplets.
    #[arg(long)]
    pub perceptual: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct BuildTriplets {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long, default_value = "datasets/train")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 320)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "attribute_only")]
    pub inversion: ConditioningMode,
    #[arg(long, default_value_t = 28)]
    pub steps: usize,
    /// Also write an occlusion-augmented copy with this share of occluded triplets.
    #[arg(long)]
    pub occlusion_fraction: Option<f64>,
    /// Keep triplets that fail the donor-dominance check.
    #[arg(long)]
    pub no_quality_gate: bool,
    #[command(flatten)]
    pub instruments: Instruments,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Swap {
    /// Teacher or student run directory or checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// A conditioning mode for inversion, or `fresh_noise`.
    #[arg(long, default_value = "attribute_only")]
    pub inversion: InversionMode,
    #[arg(long, default_value_t = 28)]
    pub steps: usize,
    #[command(flatten)]
    pub instruments: Instruments,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Invert {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Noise tensor output (safetensors).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "attribute_only")]
    pub mode: ConditioningMode,
    #[arg(long, default_value_t = 28)]
    pub steps: usize,
    #[command(flatten)]
    pub instruments: Instruments,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub pairs: usize,
    #[arg(long, default_value = "datasets/eval")]
    pub data: PathBuf,
    #[arg(long, default_value = "checkpoints/probe.safetensors")]
    pub probe: PathBuf,
    /// Report directory; defaults to `<model>/eval_s<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "attribute_only")]
    pub inversion: InversionMode,
    #[arg(long, default_value_t = 28)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub grid_rows: usize,
    #[command(flatten)]
    pub instruments: Instruments,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AblateDegradation {
    /// Base teacher config; its degradation is replaced per sweep entry.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "datasets/train")]
    pub data: PathBuf,
    #[arg(long, default_value = "datasets/eval")]
    pub eval_data: PathBuf,
    #[arg(long, default_value = "checkpoints/probe.safetensors")]
    pub probe: PathBuf,
    #[arg(long, default_value = "ablations/degradation")]
    pub out: PathBuf,
    /// Settings to sweep; defaults to the full grid.
    #[arg(long, value_delimiter = ',')]
    pub specs: Option<Vec<DegradationSpec>>,
    #[arg(long, default_value_t = 200)]
    pub pairs: usize,
    #[arg(long, default_value_t = 28)]
    pub steps: usize,
    #[command(flatten)]
    pub instruments: Instruments,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AnalyzeNoise {
    #[arg(long)]
    pub model: PathBuf,
    /// `all` or a comma-separated list of conditioning modes.
    #[arg(long, default_value = "all")]
    pub modes: String,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value = "datasets/eval")]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 28)]
    pub steps: usize,
    #[arg(long, default_value_t = 50)]
    pub mc_trials: usize,
    #[command(flatten)]
    pub instruments: Instruments,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Benchmark {
    /// `reduced`, `full`, or a path to a TOML scale file.
    #[arg(long, default_value = "reduced")]
    pub scale: String,
    #[arg(long, default_value = "benchmark")]
    pub out: PathBuf,
    /// Trends to run (a-e, occlusion); all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub trends: Option<Vec<String>>,
    /// Override the seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Override the dataset seed.
    #[arg(long)]
    pub seed: Option<u64>,
}
