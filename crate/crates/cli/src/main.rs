mod commands;
mod failure;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "deskbc", version, about = "Desk-scale behavior-cloning experiments")]
pub struct Cli {
    /// Seed for every random choice; equal seeds give identical outputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Validate inputs and configuration, then exit without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Worker threads for commands with independent units of work.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Record scripted-expert episodes into a dataset directory.
    GenData(GenDataArgs),
    /// Apply the quality filters and copy passing trajectories.
    Filter(FilterArgs),
    /// Train a policy with periodic checkpoints.
    Train(TrainArgs),
    /// Train the inverse-dynamics labeler.
    TrainIdm(TrainArgs),
    /// Label a dataset's frames with an inverse-dynamics model.
    PseudoLabel(PseudoLabelArgs),
    /// Run a policy in the corridor and record its episodes.
    Rollout(RolloutArgs),
    /// Closed-loop evaluation (mean/std over episodes).
    Evaluate(EvaluateArgs),
    /// Measure per-stage inference latency.
    Benchmark(BenchmarkArgs),
    /// Train the toy nets and trace the causality metric.
    ToyRun(ToyRunArgs),
    /// Causality score for one checkpoint or every checkpoint of a run.
    EvalCausality(EvalCausalityArgs),
    /// Keyboard perplexity on a dataset.
    EvalPerplexity(EvalPerplexityArgs),
    /// Action-distribution divergence under lossy frame transforms.
    GapProbe(GapProbeArgs),
    /// Fit L(D) = L_inf + (D_c / D)^alpha to (D, L) points.
    FitScaling(FitScalingArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 50)]
    pub episodes: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// `corridor` or `target-tap`.
    #[arg(long, default_value = "corridor")]
    pub env: String,
    /// Probability per step of a random-action burst (recorded with loss masked).
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Track definition file (TOML: `waypoints`, `width`).
    #[arg(long)]
    pub track: Option<PathBuf>,
    /// Collection config file (TOML); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Episode length for the target-tap arena.
    #[arg(long, default_value_t = 200)]
    pub target_steps: usize,
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.6)]
    pub max_hold: f64,
    #[arg(long, default_value_t = 6)]
    pub max_keys: usize,
    #[arg(long, default_value_t = 1.0)]
    pub min_changes: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML with optional `[model]`, `[train]` tables and `bins_per_side`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PseudoLabelArgs {
    #[arg(long)]
    pub idm: PathBuf,
    /// Dataset whose frames are labeled (its actions are ignored).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RealtimeArgs {
    /// Attention window in timesteps (defaults to the model's history length).
    #[arg(long)]
    pub window: Option<usize>,
    /// Sampling temperature; 0 decodes by argmax.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Exponential smoothing of emitted mouse deltas, in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    pub mouse_smoothing: f64,
}

#[derive(Args, Debug)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub episodes: usize,
    #[arg(long, default_value_t = 1500)]
    pub budget: usize,
    #[command(flatten)]
    pub realtime: RealtimeArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// `expert`, `random`, or a policy checkpoint path.
    #[arg(long)]
    pub policy: String,
    #[arg(long, default_value = "corridor")]
    pub env: String,
    #[arg(long, default_value_t = 16)]
    pub episodes: usize,
    /// Step budget per corridor episode / episode length in the arena.
    #[arg(long, default_value_t = 1500)]
    pub budget: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub realtime: RealtimeArgs,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    /// Policy checkpoint; without it a randomly initialised model is built
    /// from `--config` (or the default configuration).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub realtime: RealtimeArgs,
}

#[derive(Args, Debug)]
pub struct ToyRunArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,1,3")]
    pub depths: Vec<usize>,
    #[arg(long, default_value_t = 200_000)]
    pub steps: usize,
    /// Number of seeds, starting at `--seed`.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 1000)]
    pub eval_every: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalCausalityArgs {
    /// Single policy checkpoint.
    #[arg(long, conflicts_with = "run")]
    pub checkpoint: Option<PathBuf>,
    /// Training output directory; every checkpoint in it is scored.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub chunks: usize,
    #[arg(long, default_value_t = 0.5)]
    pub p: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Frames per evaluation sequence.
    #[arg(long, default_value_t = 40)]
    pub seq_len: usize,
    /// Evaluation seeds (starting at `--seed`) for the reported mean/std.
    #[arg(long, default_value_t = 5)]
    pub eval_seeds: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalPerplexityArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Window length (defaults to the model's history length).
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GapProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// `noise`, `downscale`, `quantize` or `identity`.
    #[arg(long, default_value = "noise")]
    pub transform: String,
    #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
    pub strengths: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long, default_value_t = 16)]
    pub seq_len: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitScalingArgs {
    /// CSV with header `D,L`.
    #[arg(long, required_unless_present = "use_params")]
    pub points: Option<PathBuf>,
    /// Skip fitting and use `L_INF,D_C,ALPHA`.
    #[arg(long, value_delimiter = ',')]
    pub use_params: Option<Vec<f64>>,
    /// Print the fitted law's prediction at these data sizes.
    #[arg(long, value_delimiter = ',')]
    pub predict: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            std::process::exit(code);
        }
    };
    if let Err(f) = commands::dispatch(&cli) {
        eprintln!("{f}");
        std::process::exit(f.exit_code());
    }
}

pub type CmdResult = Result<(), Failure>;
