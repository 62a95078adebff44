//! Argument handling and exit codes.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::compare::{compare_dirs, seed_sweep};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{execute, full_run, Phase};

pub const OUT_ENV: &str = "FAIRTRANS_OUT";
pub const DEFAULT_OUT: &str = "fairtrans-out";

#[derive(Debug, Parser)]
#[command(name = "fairtrans", version, about = "Group-domain translation augmentation experiments")]
pub struct Cli {
    /// Experiment configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory [default: $FAIRTRANS_OUT, then ./fairtrans-out].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the training and verification datasets.
    Gen,
    /// Train the six cyclic translator pairs.
    TrainTranslators,
    /// Build the augmented training set from the configured plan.
    Augment,
    /// Train one recognizer per configured loss kind.
    Train,
    /// Per-group verification reports and transfer success.
    Eval,
    /// Every phase in order; translation is skipped when the plan is `none`.
    Run,
    /// Delta tables between two run directories. Exits 3 unless the
    /// spread dropped for most loss kinds (or nothing changed).
    Compare { baseline: PathBuf, treated: PathBuf },
    /// Baseline and treated runs for each seed, with median rows.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_path(p).map_err(|e| match e {
            CliError::Io(io) => CliError::Usage(format!("cannot read {}: {io}", p.display())),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.out.clone()))
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Runs the parsed command; `Ok` carries the exit code.
pub fn dispatch(cli: &Cli) -> Result<i32> {
    if let Command::Compare { baseline, treated } = &cli.command {
        let out = out_dir(cli, None);
        let (deltas, verdict) = compare_dirs(baseline, treated, &out)?;
        if !cli.quiet {
            print!("{}", fairtrans_core::faireval::deltas_markdown(&deltas));
        }
        log::info!("deltas written to {}", out.display());
        return Ok(verdict.exit_code());
    }
    let cfg = load_config(cli)?;
    let out = out_dir(cli, Some(&cfg));
    let phases = match &cli.command {
        Command::Gen => vec![Phase::Gen],
        Command::TrainTranslators => vec![Phase::TrainTranslators],
        Command::Augment => vec![Phase::Augment],
        Command::Train => vec![Phase::Train],
        Command::Eval => vec![Phase::Eval],
        Command::Run => full_run(cfg.plan),
        Command::Sweep { seeds } => {
            let summary = seed_sweep(&cfg, seeds, &out)?;
            if !cli.quiet {
                print!("{}", summary.markdown());
            }
            return Ok(0);
        }
        Command::Compare { .. } => unreachable!("handled above"),
    };
    let outcome = execute(&cfg, &out, &phases)?;
    if !cli.quiet && phases.contains(&Phase::Eval) {
        print!("{}", fairtrans_core::faireval::reports_markdown(&outcome.reports));
        if let Some(t) = outcome.transfer_overall {
            println!("transfer success: {t:.2}%");
        }
    }
    Ok(0)
}

/// Parses `args`, sets up logging, runs, and maps errors to exit codes:
/// 1 usage or configuration, 2 runtime, 3 compare without a spread reduction.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
