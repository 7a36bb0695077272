//! `cnflm`: train, evaluate, analyze, self-check and sample language models
//! with pluggable output heads.
//!
//! Exit status: 0 on success, 2 for invalid configuration or usage, 1 for
//! any failure at run time (including a failed gradient check).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] cnflm::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(cnflm::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// INI file with [model], [train] and [data] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root; runs go to `<out>/<name>/`.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Parser, Debug)]
#[command(name = "cnflm", version, about = "Language-model output heads: softmax, MoS, DOC, ODE and CNF")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a run directory.
    Train(Common),
    /// Print nll/ppl/bpc for a checkpoint (or a fresh model) on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run directory to take the config, vocabulary and checkpoint from.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Checkpoint file; defaults to `<run>/ckpt-best`, or a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "valid")]
        split: String,
    },
    /// Numerical rank of head outputs: the synthetic bottleneck experiment,
    /// or a trained model's matrices over real contexts with `--run`.
    AnalyzeRank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Contexts read from the split when analyzing a run.
        #[arg(long, default_value_t = 100)]
        contexts: usize,
        #[arg(long, default_value = "valid")]
        split: String,
        /// Bottleneck: contexts, vocabulary and hidden size.
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        m: usize,
        #[arg(long, default_value_t = 3)]
        d: usize,
        /// Bottleneck heads, comma separated.
        #[arg(long, default_value = "softmax,mos,cnf,context_cnf")]
        heads: String,
        #[arg(long)]
        steps: Option<usize>,
        /// Standard deviation of the target's Gaussian logits.
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Central-difference gradient suite over every primitive, layer and head.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        cases: usize,
        /// Cases per head and whole-model check.
        #[arg(long, default_value_t = 100)]
        head_cases: usize,
        /// Also write the results as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Sample text after a prompt.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 200)]
        length: usize,
        /// 0 decodes greedily.
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(common) => commands::train(&common),
        Command::Eval {
            common,
            run,
            checkpoint,
            split,
        } => commands::eval(&common, run.as_deref(), checkpoint.as_deref(), &split),
        Command::AnalyzeRank {
            common,
            run,
            checkpoint,
            contexts,
            split,
            n,
            m,
            d,
            heads,
            steps,
            scale,
        } => match run {
            Some(dir) => commands::rank_of_run(&common, &dir, checkpoint.as_deref(), contexts, &split),
            None => commands::bottleneck(&common, n, m, d, &heads, steps, scale),
        },
        Command::GradCheck {
            seed,
            cases,
            head_cases,
            json,
        } => commands::grad_check(seed, cases, head_cases, json.as_deref()),
        Command::Generate {
            common,
            run,
            checkpoint,
            prompt,
            length,
            temperature,
        } => commands::generate(&common, run.as_deref(), checkpoint.as_deref(), &prompt, length, temperature),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
