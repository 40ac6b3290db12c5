//! `tilevlm`: tiling, data generation, training, evaluation, cost reports
//! and checkpoint inspection for the tiled-view pipeline.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tilevlm::eval::TaskKind;
use tilevlm::grid::GridShape;
use tilevlm::Error;

/// Environment variable that relocates relative output paths.
pub const OUTPUT_ROOT_ENV: &str = "TILEVLM_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "tilevlm", version, about = "Tiled-view vision-language toolkit")]
struct Cli {
    /// Worker threads; 1 gives the bit-reproducible schedule.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split an image into tiles (plus optional global view) as PNGs.
    Tile(TileArgs),
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Run both training phases and evaluate, from a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or train and evaluate a sweep of grids.
    Eval(EvalArgs),
    /// Analytic FLOP estimates for one or more grid configurations.
    Cost(CostArgs),
    /// Print a checkpoint's layout, digests and metadata.
    InspectCheckpoint(InspectArgs),
    /// Re-run a training run from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct TileArgs {
    /// Input image (PNG or PNM).
    image: PathBuf,
    /// Output directory.
    out: PathBuf,
    /// Grid such as `2x2`, or `2x2+g` to add the global view.
    #[arg(long, default_value = "1x1")]
    grid: GridShape,
    /// Append the global view.
    #[arg(long)]
    global: bool,
    /// Side of every emitted view, in pixels.
    #[arg(long, default_value_t = 64)]
    view_side: usize,
}

#[derive(Args, Debug, Clone)]
struct TaskArgs {
    /// Task with default parameters.
    #[arg(long, conflicts_with = "task_config")]
    task: Option<TaskKind>,
    /// TOML or JSON file holding a task specification.
    #[arg(long)]
    task_config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Index of the first sample.
    #[arg(long, default_value_t = 0)]
    offset: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run config (TOML or JSON).
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long, required_unless_present = "config", conflicts_with = "config")]
    checkpoint: Option<PathBuf>,
    /// Run config: train one model per swept grid and seed, then evaluate.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    task: TaskArgs,
    /// Comma-separated grids, e.g. `1x1,2x2,2x2+g,3x3,3x3+g`.
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<GridShape>>,
    /// Comma-separated seeds (training seeds with --config, data seeds
    /// with --checkpoint).
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Test samples per seed (checkpoint mode).
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Index of the first test sample (checkpoint mode).
    #[arg(long, default_value_t = 0)]
    offset: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Encoder and decoder defaults of this toolkit.
    Toy,
    /// A 400M-class encoder with a 7B-class decoder.
    Large,
}

#[derive(Args, Debug)]
struct CostArgs {
    /// Take encoder/decoder shapes from a run config instead of a preset.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "large")]
    preset: Preset,
    /// Comma-separated grids; defaults to the standard five.
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<GridShape>>,
    #[arg(long, default_value = "1x1")]
    baseline: GridShape,
    /// Text tokens per sample; defaults to the preset's.
    #[arg(long)]
    text_len: Option<usize>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    /// Also write cost.json, cost.csv and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    checkpoint: PathBuf,
    /// Write a copy with LoRA adapters folded into the base weights.
    #[arg(long)]
    export_merged: Option<PathBuf>,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Process exit status for each error class.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse(_) | Error::InvalidArgument(_) | Error::Capacity(_) | Error::Json(_) => 2,
        Error::Contract(_) | Error::Shape(_) => 3,
        Error::Io { .. } => 4,
        Error::FreezeViolation { .. } => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    let run = move || commands::dispatch(cli.command, threads);
    let result = match threads {
        Some(t) => tilevlm::par::with_threads(t, run),
        None => run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_failure_class() {
        let io = Error::Io {
            path: "x".into(),
            source: std::io::Error::other("x"),
        };
        let freeze = Error::FreezeViolation {
            prefix: "lm.".into(),
            phase: "finetune".into(),
        };
        let codes = [
            exit_code(&Error::Config("x".into())),
            exit_code(&Error::Contract("x".into())),
            exit_code(&io),
            exit_code(&freeze),
        ];
        assert_eq!(codes, [2, 3, 4, 5]);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
