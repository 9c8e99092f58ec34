use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use grouptron::trainer::ClipMode;

#[derive(Debug, Parser)]
#[command(name = "grouptron", version, about = "Group-aware pedestrian trajectory forecasting")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON file with `seed`, `model` and `train` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory that every artifact is written to.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for featurization, prediction and evaluation.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub protocol: Option<ProtocolArg>,
    /// Use the 8-dimensional scene embedding.
    #[arg(long, global = true)]
    pub eth_config: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    #[value(name = "most_likely")]
    MostLikely,
    #[value(name = "best_of_20")]
    BestOf20,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ClipArg {
    #[value(name = "global_norm")]
    GlobalNorm,
    #[value(name = "element")]
    Element,
}

impl From<ClipArg> for ClipMode {
    fn from(c: ClipArg) -> Self {
        match c {
            ClipArg::GlobalNorm => ClipMode::GlobalNorm,
            ClipArg::Element => ClipMode::Element,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse raw four-column trajectory files into `scenes.jsonl`.
    Ingest {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Generate synthetic crossing-group scenes into `scenes.jsonl`.
    Synth {
        #[arg(long, default_value_t = 60)]
        scenes: usize,
        #[arg(long, default_value = "syn")]
        prefix: String,
        /// Position noise standard deviation in meters.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Cut 8+12 windows into `windows.jsonl`.
    Windows {
        /// Raw trajectory files or `scenes.jsonl` collections (default: `<out>/scenes.jsonl`).
        inputs: Vec<PathBuf>,
        /// Keep only windows whose tick has at least this many pedestrians present.
        #[arg(long)]
        min_present: Option<usize>,
    },
    /// Group pedestrians per scene tick into `groups.json`.
    Cluster {
        inputs: Vec<PathBuf>,
        /// Ticks to cluster, comma separated (default: every tick with someone present).
        #[arg(long, value_delimiter = ',')]
        ticks: Vec<usize>,
        /// Annotation file (timesteps → annotators → groups) to score with Dice.
        #[arg(long, requires = "ticks")]
        annotations: Option<PathBuf>,
    },
    /// Train a model and write `model.bin`, `best.bin` and `metrics.csv`.
    Train {
        #[arg(long)]
        windows: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Write `predictions.jsonl` for a window file.
    Predict {
        #[arg(long)]
        windows: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score predictions and the constant-velocity baseline into `eval.csv` and `eval.json`.
    Eval {
        #[arg(long)]
        windows: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Score an existing predictions file instead of running the model.
        #[arg(long, conflicts_with = "model")]
        predictions: Option<PathBuf>,
        /// Dataset label in the report (default: the window file stem).
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Print the graphs of one window as JSON.
    Inspect {
        #[arg(long)]
        windows: Option<PathBuf>,
        /// Position of the window in the file.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Render SVG plots of predictions into `<out>/plots`.
    Plot {
        #[arg(long)]
        windows: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long, value_enum)]
    pub clip_mode: Option<ClipArg>,
}
