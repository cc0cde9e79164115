//! `strata`: generate corpora, train, evaluate, gradcheck, export and reproduce.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;

use config::RunConfig;
use error::CliError;

/// Config flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML run config; omitted keys keep their defaults.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.m=3`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for generation, training and evaluation alike.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(s) = self.seed {
            cfg.reseed(s);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic train/eval corpus pair.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one mode; writes checkpoints and a metrics log.
    Train {
        /// Training corpus directory (holds manifest.json and videos.jsonl).
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to start from (required by wo-joint: the child-only weights).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue from `<out>/checkpoint.json` up to the configured step budget.
        #[arg(long)]
        resume: bool,
        /// Steps between intermediate checkpoints; 0 keeps only the final one.
        #[arg(long, default_value_t = 100)]
        checkpoint_every: usize,
    },
    /// Evaluate a checkpoint on every protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Held-out corpus directory.
        #[arg(long)]
        corpus: PathBuf,
        /// Training corpus for the linear probe's training features.
        #[arg(long)]
        train_corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op, encoder, aggregator and loss.
    Gradcheck {
        /// Random draws per op.
        #[arg(long, default_value_t = strata_core::gradients::OP_SEEDS)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write clip- or video-level embeddings as JSON lines.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "parent")]
        level: commands::Level,
        /// Output file (.jsonl).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every mode on one corpus and print the comparison table.
    Reproduce {
        #[arg(long)]
        out: PathBuf,
        /// Wall-clock budget in minutes (overrides reproduce.budget_minutes).
        #[arg(long)]
        budget_minutes: Option<f64>,
    },
}

#[derive(Parser, Debug)]
#[command(name = "strata", version, about = "Two-level contrastive video-language training on synthetic corpora")]
struct Root {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

fn run(root: Root) -> Result<(), CliError> {
    let cfg = root.config.load()?;
    match root.command {
        Command::Generate { out } => commands::generate(&cfg, &out),
        Command::Train {
            corpus,
            out,
            init,
            resume,
            checkpoint_every,
        } => commands::train(&cfg, &corpus, &out, init.as_deref(), resume, checkpoint_every),
        Command::Eval {
            checkpoint,
            corpus,
            train_corpus,
            out,
        } => commands::eval(&cfg, &checkpoint, &corpus, train_corpus.as_deref(), &out),
        Command::Gradcheck { seeds, out } => commands::gradcheck(seeds, out.as_deref()),
        Command::Export {
            checkpoint,
            corpus,
            level,
            out,
        } => commands::export(&checkpoint, &corpus, level, &out),
        Command::Reproduce { out, budget_minutes } => {
            let mut cfg = cfg;
            if let Some(b) = budget_minutes {
                cfg.reproduce.budget_minutes = b;
                cfg.validate()?;
            }
            commands::reproduce(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    let root = match Root::try_parse() {
        Ok(r) => r,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(root) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let msg = e.to_string().replace('\n', " ");
            // core messages already lead with their category
            let msg = msg.strip_prefix(&format!("{kind} error: ")).unwrap_or(&msg);
            eprintln!("error: {kind}: {msg}");
            ExitCode::from(e.exit_code())
        }
    }
}
