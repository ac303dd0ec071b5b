//! `cameo`: data generation, staged training, sampling, evaluation, ablations
//! and curation on the synthetic audio-visual world.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use cameo_core::synthetic_world::Mix;
use cameo_core::trainer::Stage;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "cameo",
    version,
    about = "Identity-bound joint audio-video generation on a synthetic world"
)]
pub struct Cli {
    /// Experiment configuration (TOML). Flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for all randomness; falls back to IAP_SEED, then the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset (manifest plus tensor files).
    GenData(GenDataArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Sample one held-out scene from a checkpoint.
    Sample(SampleArgs),
    /// Score a checkpoint on held-out scenes.
    Eval(EvalArgs),
    /// Train and evaluate the full pipeline next to ablated variants.
    Ablate(AblateArgs),
    /// Group clips by identity and build reference/target pairs.
    Curate(CurateArgs),
    /// Print the token layout and positions of a scene.
    InspectPositions(InspectArgs),
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: cameo_core::Error| e.to_string())
}

fn parse_mix(s: &str) -> Result<Mix, String> {
    s.parse().map_err(|e: cameo_core::Error| e.to_string())
}

/// Conditioning component that a single stage can switch off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Component {
    IdentityEmbeddings,
    SubjectAnchors,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    IdentityEmbeddings,
    SubjectAnchors,
    Staging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Standard,
    LargePose,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 500)]
    pub scenes: usize,
    /// hierarchy, audio, video, paired or multiview.
    #[arg(long, default_value = "hierarchy", value_parser = parse_mix)]
    pub mix: Mix,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// stage1_audio, stage1_video, stage2_joint or stage3_multiview.
    #[arg(long, value_parser = parse_stage)]
    pub stage: Stage,
    /// Checkpoint of an earlier stage to start from.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Checkpoint of this stage to continue.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Dataset directory from `gen-data`; generated in memory when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, value_enum)]
    pub disable: Vec<Component>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Index of the held-out scene.
    #[arg(long, default_value_t = 0)]
    pub scene: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Standard)]
    pub split: SplitArg,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value = "sample")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Standard)]
    pub split: SplitArg,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// JSONL report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Ablations to run next to the full model; all three when absent.
    #[arg(long, value_enum)]
    pub disable: Vec<Ablation>,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value = "ablation")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// Clip manifest (JSONL with clip_id, face_embedding, speaker_embedding, transcript).
    #[arg(long, required_unless_present = "synthetic")]
    pub manifest: Option<PathBuf>,
    /// Use a synthetic corpus with this many identities instead of a manifest.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = 0.6)]
    pub tau_face: f64,
    #[arg(long, default_value_t = 0.7)]
    pub tau_voice: f64,
    #[arg(long, default_value_t = 0.2)]
    pub max_overlap: f64,
    #[arg(long, default_value = "curation")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, default_value_t = 2)]
    pub subjects: usize,
    #[arg(long, default_value_t = 1)]
    pub views: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
