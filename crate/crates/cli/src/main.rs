//! `hingenet`: generate data, train, decode, score and run the ablations.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hingenet::config::ExperimentConfig;
use hingenet::Error;

#[derive(Parser, Debug)]
#[command(name = "hingenet", version, about = "Beat and downbeat tracking with a separable hinge network")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Global {
    /// JSON experiment config; absent keys keep their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one config value, e.g. `--set train.lr=0.0005`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Seed for every random stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output file or directory.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,

    /// Worker threads for batch and ablation parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset directory.
    GenData,
    /// Train the configured method on a dataset directory.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Score estimated beat files against references.
    Evaluate {
        /// Estimated beats: a file or a directory of `<id>.beats`.
        #[arg(long, value_name = "PATH")]
        est: PathBuf,
        /// Reference beats: a file or a directory of `<id>.beats`.
        #[arg(long = "ref", value_name = "PATH")]
        reference: PathBuf,
    },
    /// Decode activations into beats, from a file or by running a model.
    Decode {
        /// Activation file to decode.
        #[arg(long, value_name = "FILE", conflicts_with_all = ["model", "data"])]
        activations: Option<PathBuf>,
        /// Checkpoint to run over a dataset.
        #[arg(long, value_name = "FILE", requires = "data")]
        model: Option<PathBuf>,
        #[arg(long, value_name = "DIR", requires = "model")]
        data: Option<PathBuf>,
        /// Which items of the dataset to decode.
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
        split: String,
    },
    /// Projection factor by HAM on/off ablation.
    Ablate {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Compare the fine-tuning methods on one dataset.
    Compare {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Print the rounded harmonic intervals.
    Intervals {
        #[arg(long = "Q", default_value_t = 12)]
        q: u32,
        #[arg(long, default_value_t = 5)]
        n: u32,
    },
    /// Print checkpoint metadata as JSON.
    Inspect { checkpoint: PathBuf },
}

/// Exit status for a library error: usage 2, I/O or format 3, numeric 4.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Contract(_) => 2,
        Error::Io { .. } | Error::Format { .. } | Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn load_config(g: &Global) -> hingenet::Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for o in &g.overrides {
        cfg.set(o)?;
    }
    if let Some(seed) = g.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(jobs) = g.jobs {
        cfg.jobs = jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> hingenet::Result<()> {
    let cfg = load_config(&cli.global)?;
    let out = cli.global.out.clone();
    let exec = hingenet::Exec::default();
    let jobs = cfg.jobs;
    exec.with_jobs(jobs, move || match cli.command {
        Command::GenData => commands::gen_data(&cfg, out.as_deref()),
        Command::Train { data } => commands::train(&cfg, &data, out.as_deref()),
        Command::Evaluate { est, reference } => commands::evaluate(&est, &reference, out.as_deref()),
        Command::Decode {
            activations,
            model,
            data,
            split,
        } => match (activations, model, data) {
            (Some(act), _, _) => commands::decode_file(&cfg, &act, out.as_deref()),
            (None, Some(model), Some(data)) => commands::decode_dataset(&cfg, &model, &data, &split, out.as_deref()),
            _ => Err(Error::InvalidArgument("decode needs --activations or --model with --data".into())),
        },
        Command::Ablate { data } => commands::ablate(&cfg, &data, out.as_deref()),
        Command::Compare { data } => commands::compare(&cfg, &data, out.as_deref()),
        Command::Intervals { q, n } => commands::intervals(q, n),
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint),
    })?
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid usage");
            eprintln!("error: usage: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {}", one_line(&e.to_string()));
            ExitCode::from(code)
        }
    }
}
