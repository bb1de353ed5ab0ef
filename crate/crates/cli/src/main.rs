use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sloc::config::{parse_config, ExperimentConfig, ExperimentKind};
use sloc::diagnostics::{Status, Summary};
use sloc::runner::{run_experiment, RunOptions};

#[derive(Parser)]
#[command(name = "sloc", version, about = "Stochastic localization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Localization runs on a configured density.
    Simulate(Common),
    /// Runs on the standard Gaussian against its closed form.
    GaussianCheck(Common),
    /// Thin-shell, κ and q statistics per density.
    Constants(Common),
    /// Halfspace mass processes and their variance bound.
    Isoperimetry(Common),
    /// Coupled runs of two densities.
    Couple(Common),
    /// Merge summaries from earlier output directories.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stop at the first failed run.
    #[arg(long)]
    fail_fast: bool,
}

impl Command {
    fn split(&self) -> (ExperimentKind, &Common) {
        match self {
            Command::Simulate(c) => (ExperimentKind::Simulate, c),
            Command::GaussianCheck(c) => (ExperimentKind::GaussianCheck, c),
            Command::Constants(c) => (ExperimentKind::Constants, c),
            Command::Isoperimetry(c) => (ExperimentKind::Isoperimetry, c),
            Command::Couple(c) => (ExperimentKind::Couple, c),
            Command::Report(c) => (ExperimentKind::Report, c),
        }
    }
}

fn load(kind: ExperimentKind, args: &Common) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_config(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?
        }
        None if kind == ExperimentKind::Report => parse_config("experiment = \"report\"\n")?,
        None => bail!("--config is required for {}", kind.name()),
    };
    if config.experiment != kind {
        bail!("config describes a {} experiment, not {}", config.experiment.name(), kind.name());
    }
    if args.seed.is_some() {
        config.seed = args.seed;
    }
    if args.out.is_some() {
        config.out = args.out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn print_summary(out: &mut impl Write, summary: &Summary) -> io::Result<()> {
    let width = summary.keys().map(|k| k.len()).max().unwrap_or(0);
    for (name, check) in summary {
        let status = match check.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Report => "    ",
        };
        let ci = check.ci.map(|[lo, hi]| format!("  [{lo:.4e}, {hi:.4e}]")).unwrap_or_default();
        writeln!(out, "{status}  {name:<width$}  {:.6e}{ci}", check.value)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let (kind, args) = cli.command.split();
    let config = load(kind, args)?;
    let outcome = run_experiment(&config, RunOptions { fail_fast: args.fail_fast })?;
    // A closed pipe on stdout is not an error worth reporting.
    let _ = report(&outcome);
    Ok(outcome.passed())
}

fn report(outcome: &sloc::runner::Outcome) -> io::Result<()> {
    let mut out = io::stdout().lock();
    print_summary(&mut out, &outcome.summary)?;
    for f in &outcome.manifest.failures {
        writeln!(out, "failed: {f}")?;
    }
    writeln!(out, "{} files in {}", outcome.manifest.files.len(), outcome.dir.display())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
