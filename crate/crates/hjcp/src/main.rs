use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use hjcp::commands;
use hjcp::config::{RunConfig, StrategyName};

#[derive(Parser)]
#[command(name = "hjcp", version, about = "Conformally calibrated HJ safety filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Miscoverage level for evaluation and certification.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Restrict ensemble policies to one switching strategy.
    #[arg(long, global = true, value_enum)]
    strategy: Option<StrategyName>,
    /// Ensemble size.
    #[arg(long, global = true)]
    members: Option<usize>,
    /// Paired evaluation trials.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Certification trial counts, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    ncert: Option<Vec<usize>>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train the value-network ensemble.
    Train,
    /// Build calibration sets and conformal quantiles per member.
    Calibrate,
    /// Evaluate nominal, single-member and ensemble filters on paired trials.
    Eval,
    /// Trajectory-level certification with Beta posteriors.
    Certify,
    /// Grid oracle on the double integrator plus coverage studies.
    Oracle,
    /// Summarise the reports in the output directory.
    Report,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    if let Some(a) = cli.alpha {
        cfg.alpha = a;
    }
    if let Some(s) = cli.strategy {
        cfg.strategy = Some(s);
    }
    if let Some(m) = cli.members {
        cfg.members = m;
    }
    if let Some(t) = cli.trials {
        cfg.trials = t;
    }
    if let Some(n) = cli.ncert {
        cfg.n_cert = n;
    }
    let outcome = match cli.command {
        Command::Train => commands::train(&cfg)?,
        Command::Calibrate => commands::calibrate(&cfg)?,
        Command::Eval => commands::eval(&cfg)?,
        Command::Certify => commands::certify_cmd(&cfg)?,
        Command::Oracle => commands::oracle(&cfg)?,
        Command::Report => commands::report(&cfg)?,
    };
    for line in &outcome.summary {
        println!("{line}");
    }
    println!("manifest: {}", outcome.manifest.display());
    Ok(())
}
