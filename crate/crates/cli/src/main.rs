use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use netpanel::io::{run, Mode, Overrides, RunConfig};

/// Estimate, simulate and benchmark dynamic network panels with entry and exit.
#[derive(Parser, Debug)]
#[command(name = "netpanel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw one synthetic panel and write it as CSV with its edge list.
    Simulate(Flags),
    /// Fit the model to a panel CSV.
    Estimate(Flags),
    /// Run a Monte Carlo study of the estimator.
    Montecarlo(Flags),
    /// Build a weight matrix and report its properties.
    Weights(Flags),
}

#[derive(Args, Debug)]
struct Flags {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Search interval for rho, as `a,b`.
    #[arg(long, value_parser = parse_bounds, allow_hyphen_values = true)]
    rho_bounds: Option<(f64, f64)>,
    /// Sandwich standard errors robust to non-normal errors.
    #[arg(long)]
    robust: bool,
    /// Distance-band weights with this radius in km.
    #[arg(long)]
    distance_km: Option<f64>,
    /// Rook grid weights, as `RxC`.
    #[arg(long, value_parser = parse_rook)]
    rook: Option<(usize, usize)>,
    /// Monte Carlo replications.
    #[arg(long)]
    reps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Take logs of the outcome column.
    #[arg(long)]
    log_y: bool,
}

fn parse_bounds(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected `a,b`")?;
    let a: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if !(a < b) {
        return Err(format!("lower bound {a} must be below upper bound {b}"));
    }
    Ok((a, b))
}

fn parse_rook(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or("expected `RxC`")?;
    let r: usize = r.trim().parse().map_err(|e| format!("{e}"))?;
    let c: usize = c.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((r, c))
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let (mode, flags) = match cli.command {
        Command::Simulate(f) => (Mode::Simulate, f),
        Command::Estimate(f) => (Mode::Estimate, f),
        Command::Montecarlo(f) => (Mode::Montecarlo, f),
        Command::Weights(f) => (Mode::Weights, f),
    };
    let mut config = match &flags.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if flags.distance_km.is_some() && flags.rook.is_some() {
        bail!("--distance-km and --rook are mutually exclusive");
    }
    config.apply(&Overrides {
        mode: Some(mode),
        seed: flags.seed,
        rho_bounds: flags.rho_bounds,
        robust: flags.robust,
        distance_km: flags.distance_km,
        rook: flags.rook,
        reps: flags.reps,
        out: flags.out,
        log_y: flags.log_y,
    });
    let summary = run(&config)?;
    let report = summary.out_dir.join("report.txt");
    if let Ok(text) = std::fs::read_to_string(&report) {
        print!("{text}");
    }
    eprintln!("wrote {} to {}", summary.outputs.join(", "), summary.out_dir.display());
    Ok(())
}
