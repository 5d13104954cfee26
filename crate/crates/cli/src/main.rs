mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "semalign",
    version,
    about = "Align crawl-time site logic with encrypted traffic"
)]
pub struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed applied to every randomized component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for embedding (defaults to the available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic benchmark split by site.
    Synth,
    /// Build a dataset from captures and resource logs.
    Extract(ExtractArgs),
    /// Write resource-deleted copies of a dataset.
    Augment(AugmentArgs),
    /// Measure per-site alignment anchors.
    Anchors(DatasetArg),
    /// Train the dual encoder.
    Train(TrainArgs),
    /// Write embeddings of one modality.
    Embed(EmbedArgs),
    /// Build an anchor gallery from site logic.
    Gallery(ModelDataset),
    /// Predict the site of each trace.
    Classify(ClassifyArgs),
    /// Score a checkpoint on a labeled dataset.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct DatasetArg {
    pub dataset: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// `SITE=PATH` of a pcap file or packet JSON lines; repeatable.
    #[arg(long = "traffic", required = true)]
    pub traffic: Vec<String>,
    /// `SITE=PATH` of resource JSON lines; repeatable.
    #[arg(long = "resources", required = true)]
    pub resources: Vec<String>,
    /// `SITE=N` class label; repeatable.
    #[arg(long = "label")]
    pub label: Vec<String>,
    /// Client address for pcap direction inference.
    #[arg(long)]
    pub client_ip: Option<std::net::IpAddr>,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    pub dataset: PathBuf,
    /// Copies per input pair (overrides the configuration).
    #[arg(long)]
    pub copies: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    pub dataset: PathBuf,
    /// Pre-generated augmented pairs; generated from the dataset if absent.
    #[arg(long)]
    pub augmented: Option<PathBuf>,
    /// Overrides the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Modality {
    Traffic,
    Logic,
}

#[derive(Args, Debug)]
pub struct ModelDataset {
    #[arg(long)]
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub input: ModelDataset,
    #[arg(long, value_enum, default_value = "traffic")]
    pub modality: Modality,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub input: ModelDataset,
    #[arg(long)]
    pub gallery: PathBuf,
    /// Rejection threshold (overrides the configuration).
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Closed,
    Open,
    FewshotLinear,
    FewshotTip,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: ModelDataset,
    #[arg(long, value_enum, default_value = "closed")]
    pub mode: EvalMode,
    /// Gallery to use; built from the dataset's logic if absent.
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    /// Unmonitored traces for open mode.
    #[arg(long)]
    pub unmonitored: Option<PathBuf>,
    /// Labeled traces per class in few-shot modes (overrides the configuration).
    #[arg(long)]
    pub shots: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
