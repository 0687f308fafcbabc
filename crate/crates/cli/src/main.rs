use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use svllm_cli::stages;
use svllm_cli::{CliError, Overrides, Pipeline, StageReport};
use svllm_core::evaluation::Space;
use svllm_core::prompt::Preset;
use svllm_core::retrieval::transport::TransportMode;

#[derive(Parser)]
#[command(name = "svllm", version, about = "Urban indicator prediction from street view imagery and map context")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Live,
    Replay,
    Record,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Full,
    NoCot,
    NoSvi,
    NoText,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Bin,
    Unit,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city: points, truths and replay fixtures.
    Synth,
    /// Farthest-first subsample, split and fit bin scales.
    Sample,
    /// Build geographic contexts for every sample.
    Retrieve,
    /// Query the model for every test sample and task.
    Predict,
    /// Fit and apply the KNN and GBRT baselines.
    Baseline,
    /// Import predictions from an external model (CSV: sample_id,task,prediction).
    Import {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long, value_enum, default_value = "bin")]
        space: SpaceArg,
    },
    /// Score all predictions and render the report tables.
    Evaluate,
    /// Run every ablation preset over the test split.
    Ablate,
    /// Correlate prediction bias with POI counts.
    Bias,
    /// All stages in order.
    Run,
}

fn execute(cli: Cli) -> Result<Vec<StageReport>, CliError> {
    let config = cli.config.ok_or_else(|| CliError::Config("--config is required".into()))?;
    let overrides = Overrides {
        seed: cli.seed,
        mode: cli.mode.map(|m| match m {
            Mode::Live => TransportMode::Live,
            Mode::Replay => TransportMode::Replay,
            Mode::Record => TransportMode::Record,
        }),
        preset: cli.preset.map(|p| match p {
            PresetArg::Full => Preset::Full,
            PresetArg::NoCot => Preset::WithoutCot,
            PresetArg::NoSvi => Preset::WithoutStreetview,
            PresetArg::NoText => Preset::WithoutText,
        }),
    };
    let p = Pipeline::load(&config, overrides)?;
    let one = |r: Result<StageReport, CliError>| r.map(|r| vec![r]);
    match cli.command {
        Command::Synth => one(stages::synth(&p)),
        Command::Sample => one(stages::sample(&p)),
        Command::Retrieve => one(stages::retrieve(&p)),
        Command::Predict => one(stages::predict(&p)),
        Command::Baseline => one(stages::baseline(&p)),
        Command::Import { file, model, space } => {
            let space = match space {
                SpaceArg::Bin => Space::Bin,
                SpaceArg::Unit => Space::Unit,
            };
            one(stages::import(&p, &file, &model, space))
        }
        Command::Evaluate => one(stages::evaluate(&p)),
        Command::Ablate => one(stages::ablate(&p)),
        Command::Bias => one(stages::bias(&p)),
        Command::Run => stages::run_all(&p),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(reports) => {
            for r in reports {
                println!("{}", serde_json::to_string(&r).expect("report serializes"));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("svllm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
