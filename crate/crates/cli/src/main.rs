//! `hopfavg spectrum|coeffs|simulate|limit|validate --config <file> --out <dir>`
//!
//! Exit codes: 0 success or validation pass, 1 validation fail, 2 config or
//! assumption error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use hopfavg_core::harness::{
    run_coeffs, run_dde_ensemble, run_limit_ensemble, run_spectrum, run_validation, Experiment,
};

#[derive(Parser)]
#[command(
    name = "hopfavg",
    version,
    about = "Stochastic averaging near a Hopf bifurcation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Critical pair, adjoint basis and fundamental solution.
    Spectrum(Common),
    /// Averaged coefficients on a polar grid.
    Coeffs(Common),
    /// DDE ensembles for every configured eps.
    Simulate(Common),
    /// Limit-SDE ensemble.
    Limit(Common),
    /// DDE ensembles against the limit SDE.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `sim.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let common = match &cli.command {
        Command::Spectrum(c)
        | Command::Coeffs(c)
        | Command::Simulate(c)
        | Command::Limit(c)
        | Command::Validate(c) => c,
    };
    let mut exp = Experiment::from_path(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        exp = exp.with_seed(seed);
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = common.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("building thread pool")?;
    let out = common.out.as_path();
    pool.install(|| -> anyhow::Result<bool> {
        match cli.command {
            Command::Spectrum(_) => {
                let s = run_spectrum(&exp, out)?;
                println!("omega_c = {:.12}, psi(0) = {:?}", s.omega, s.psi0);
            }
            Command::Coeffs(_) => {
                let s = run_coeffs(&exp, out)?;
                println!(
                    "{} grid points, centering residual {:e}, min PSD eigenvalue {:e}",
                    s.grid_points, s.centering.max_residual, s.psd.min_eigenvalue
                );
            }
            Command::Simulate(_) => {
                for l in run_dde_ensemble(&exp, out)?.levels {
                    println!(
                        "eps {}: {} completed, {} escaped",
                        l.eps, l.stats.completed, l.stats.escaped
                    );
                }
            }
            Command::Limit(_) => {
                let s = run_limit_ensemble(&exp, out)?;
                println!(
                    "{} completed, {} escaped",
                    s.stats.completed, s.stats.escaped
                );
            }
            Command::Validate(_) => {
                let r = run_validation(&exp, out)?;
                for l in &r.levels {
                    println!(
                        "eps {}: KS(H) = {:.4}, moments {}",
                        l.eps,
                        l.ks_h,
                        if l.moments.passed { "agree" } else { "differ" }
                    );
                }
                if let Some(c) = &r.negative_control {
                    println!(
                        "negative control (drift x{}): {}",
                        c.drift_scale,
                        if c.detected {
                            "rejected"
                        } else {
                            "NOT rejected"
                        }
                    );
                }
                println!("verdict: {}", if r.verdict { "PASS" } else { "FAIL" });
                return Ok(r.verdict);
            }
        }
        Ok(true)
    })
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
