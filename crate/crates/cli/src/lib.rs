//! The `cge` command-line driver.
//!
//! `cge <command> --config <path> [--set key=value ...]` resolves a
//! [`RunConfig`], creates a fresh run directory under `out_dir`, writes the
//! resolved configuration there and then the command's outputs.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{GenMethod, RunConfig};

/// A configuration the pipeline refuses to run. Exit code 1.
#[derive(Debug)]
pub struct ValidationError(pub String);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ValidationError {}

#[derive(Debug, Parser)]
#[command(name = "cge", version, about = "Contrastive novelty discovery pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct Common {
    /// TOML run configuration; omit to use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted `key=value` override, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the pre-training corpus, fine-tuning mixture, labels and manifest.
    Synth(Common),
    /// Train a model from scratch on `pretrain.txt`.
    Pretrain(Common),
    /// Fine-tune `inputs.pt` on the mixture, optionally with `[dp]` or `[lora]`.
    Finetune(Common),
    /// Score every fine-tuning example with every method.
    Score(Common),
    /// Run the generation method in `generate.method` over `generate.n_seeds` seeds.
    Generate(Common),
    /// Run sampling, static and iterative generation.
    Eval(Common),
    /// Compare exact and first-order contrastive scores along interpolations.
    TaylorCheck(Common),
    /// Decoding grid and noise-multiplier sweep.
    Sweep(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Self::Synth(c) => ("synth", c),
            Self::Pretrain(c) => ("pretrain", c),
            Self::Finetune(c) => ("finetune", c),
            Self::Score(c) => ("score", c),
            Self::Generate(c) => ("generate", c),
            Self::Eval(c) => ("eval", c),
            Self::TaylorCheck(c) => ("taylor-check", c),
            Self::Sweep(c) => ("sweep", c),
        }
    }
}

/// Runs one command and returns the run directory.
pub fn execute(command: &str, cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = output::create_run_dir(&cfg.out_dir, command, cfg.seed)?;
    output::write_text(&dir.join("resolved_config.toml"), &cfg.to_toml()?)?;
    match command {
        "synth" => commands::synth(cfg, &dir)?,
        "pretrain" => commands::cmd_pretrain(cfg, &dir)?,
        "finetune" => commands::cmd_finetune(cfg, &dir)?,
        "score" => commands::cmd_score(cfg, &dir)?,
        "generate" => commands::cmd_generate(cfg, &dir, &[cfg.generate.method])?,
        "eval" => commands::cmd_generate(cfg, &dir, &GenMethod::ALL)?,
        "taylor-check" => commands::cmd_taylor(cfg, &dir)?,
        "sweep" => commands::cmd_sweep(cfg, &dir)?,
        other => return Err(ValidationError(format!("unknown command {other:?}")).into()),
    }
    Ok(dir)
}

/// Exit code for a failed run: 1 for configuration problems, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use cge_core::Error as E;
    for cause in err.chain() {
        if cause.is::<ValidationError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidConfig(_)
                | E::ConfigMismatch
                | E::FractionMismatch { .. }
                | E::NoveltyTooLarge { .. }
                | E::UnknownKind(_)
                | E::UnknownMethod(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (name, common) = cli.command.parts();
    let result = match &common.config {
        Some(path) => RunConfig::load(path, &common.set),
        None => RunConfig::parse("", &common.set),
    }
    .and_then(|cfg| execute(name, &cfg));
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
