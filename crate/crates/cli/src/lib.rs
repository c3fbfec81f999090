//! Command-line front end: pretraining, probing, representation analysis,
//! the REG-token ablation and synthetic fixtures.
//!
//! [`run`] takes the full argument vector and returns the text to print on
//! stdout. Failures come back as a [`CliError`], rendered by the binary as a
//! single JSON line on stderr.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

pub mod commands;
pub mod manifest;

pub use manifest::{read_manifest, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    User,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn user(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::User,
            message: message.into(),
        }
    }

    pub fn internal(message: impl fmt::Display) -> Self {
        CliError {
            kind: ErrorKind::Internal,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::User => 1,
            ErrorKind::Internal => 2,
        }
    }

    /// `{"error":"user","message":"..."}` on one line.
    pub fn to_json_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: ErrorKind,
            message: &'a str,
        }
        serde_json::to_string(&Line {
            error: self.kind,
            message: &self.message,
        })
        .expect("error line serializes")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<tjepa::Error> for CliError {
    fn from(e: tjepa::Error) -> Self {
        use tjepa::Error as E;
        match e {
            E::Dimension(_) | E::Contract(_) | E::NonFinite(_) => CliError::internal(e),
            _ => CliError::user(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tjepa", version, about = "Self-supervised pretraining for tabular data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain an encoder and write checkpoints, metric logs and a manifest.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a head on frozen representations and report its test metric.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "linear")]
        head: String,
        #[arg(long, default_value = "linear_flatten")]
        projection: String,
    },
    /// Representation metrics of one or more checkpoints on the test split.
    Analyze {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "kl,uniformity,dist,variance")]
        metrics: String,
        #[arg(long, default_value_t = 2.0)]
        t: f64,
    },
    /// Pretrain once per REG-token count and compare the runs.
    AblateReg {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokens: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic CSV fixture with a two-feature interaction label.
    MakeSynthetic {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (program name first) and runs the command.
pub fn run(argv: &[String]) -> Result<String, CliError> {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                return Ok(e.to_string().trim_end().to_string());
            }
            let text = e.to_string();
            let msg: Vec<&str> = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            return Err(CliError::user(msg.join(" ").trim_start_matches("error: ").to_string()));
        }
    };
    let argv = argv.to_vec();
    match cli.command {
        Command::Pretrain { config, data, out, seed } => commands::pretrain(&argv, &config, &data, &out, seed),
        Command::Probe {
            checkpoint,
            data,
            labels,
            head,
            projection,
        } => commands::probe(&argv, &checkpoint, &data, &labels, &head, &projection),
        Command::Analyze {
            checkpoint,
            data,
            metrics,
            t,
        } => commands::analyze(&argv, &checkpoint, &data, &metrics, t),
        Command::AblateReg {
            config,
            data,
            tokens,
            out,
        } => commands::ablate_reg(&argv, &config, &data, &tokens, &out),
        Command::MakeSynthetic { n, d, task, seed, out } => commands::make_synthetic(&argv, n, d, &task, seed, &out),
    }
}

/// Strict config loading: unknown keys are rejected by name.
pub fn load_config(path: &Path) -> Result<tjepa::training::TrainConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::user(format!("config {}: {e}", path.display())))?;
    let cfg: tjepa::training::TrainConfig =
        serde_json::from_str(&text).map_err(|e| CliError::user(format!("config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}
