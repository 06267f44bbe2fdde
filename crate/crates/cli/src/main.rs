//! `dupimage`: duplicate question detection pipeline driven by a run manifest.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 provider or network error.

mod artifacts;
mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dupimage::eval::ConfigName;

use crate::commands::Ctx;
use crate::manifest::{Resolved, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Usage = 1,
    Data = 2,
    Provider = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub exit: Exit,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(exit: Exit, error: anyhow::Error) -> Self {
        Failure { exit, error }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Classify an error by the exit code it maps to.
pub trait ResultExt<T> {
    fn data(self) -> CmdResult<T>;
    fn provider(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for Result<T, E> {
    fn data(self) -> CmdResult<T> {
        self.map_err(|e| Failure::new(Exit::Data, e.into()))
    }

    fn provider(self) -> CmdResult<T> {
        self.map_err(|e| Failure::new(Exit::Provider, e.into()))
    }
}

fn parse_config(s: &str) -> Result<ConfigName, String> {
    s.parse::<ConfigName>().map_err(|e| e.to_string())
}

/// Flags that override manifest fields.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Never contact OCR or caption providers; cache misses count as empty.
    #[arg(long, global = true)]
    pub cache_only: bool,
    /// Worker threads: 1 runs sequentially, 0 uses every core.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    pub seed_pairing: Option<u64>,
    #[arg(long, global = true, value_name = "N")]
    pub seed_split: Option<u64>,
    #[arg(long, global = true, value_name = "N")]
    pub seed_training: Option<u64>,
    /// Configurations to run, comma separated.
    #[arg(long, global = true, value_name = "NAME[,NAME...]", value_delimiter = ',', value_parser = parse_config)]
    pub config: Option<Vec<ConfigName>>,
    /// Recall cut-offs, comma separated.
    #[arg(long, global = true, value_name = "K[,K...]", value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Delta threshold for `audit-delta`.
    #[arg(long, global = true, value_name = "X")]
    pub threshold: Option<f64>,
    /// Stop-word list, one word per line.
    #[arg(long, global = true, value_name = "PATH")]
    pub stopwords: Option<PathBuf>,
    /// Tag synonym CSV with `synonym,master` columns.
    #[arg(long, global = true, value_name = "PATH")]
    pub synonyms: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long, global = true, value_name = "X")]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true, value_name = "X")]
    pub l2: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse the corpus and keep questions with images.
    Ingest,
    /// Build duplicate and non-duplicate pairs and the train/test split.
    Pairs,
    /// Resolve OCR text and captions for every image through the cache.
    Images,
    /// Write the training feature matrix of each configuration.
    Featurize,
    /// Train one classifier per configuration.
    Train,
    /// Rank candidate masters for every test duplicate.
    Rank,
    /// Compute recall-rate@k for every configuration.
    Eval,
    /// Render the evaluation report as a Markdown table.
    Report,
    /// List pairs whose image-text and image-caption similarities disagree.
    AuditDelta,
    /// Run every stage in order.
    Run,
}

#[derive(Debug, Parser)]
#[command(
    name = "dupimage",
    version,
    about = "Duplicate question detection with image evidence"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run manifest (TOML).
    #[arg(
        long,
        global = true,
        value_name = "PATH",
        default_value = "dupimage.toml"
    )]
    manifest: PathBuf,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(flatten)]
    overrides: Overrides,
}

fn execute(cli: Cli) -> CmdResult {
    let manifest = RunManifest::load(&cli.manifest).data()?;
    let resolved = Resolved::new(&cli.manifest, manifest, &cli.overrides).data()?;
    let ctx = Ctx::new(resolved);
    match cli.command {
        Command::Ingest => commands::ingest(&ctx),
        Command::Pairs => commands::pairs(&ctx),
        Command::Images => commands::images(&ctx),
        Command::Featurize => commands::featurize(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Rank => commands::rank(&ctx),
        Command::Eval => commands::eval(&ctx),
        Command::Report => commands::report(&ctx),
        Command::AuditDelta => commands::audit_delta(&ctx),
        Command::Run => commands::run(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Exit::Usage as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.exit as u8)
        }
    }
}
