use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use idsr_core::harness::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "idsr", version, about = "Beamforming and RIS phase design for information-decoupled symbiotic radio")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one channel realization with every selected system.
    Solve(Common),
    /// Monte Carlo sweep over realizations and the configured axis.
    Sweep(Common),
    /// Per-iteration solver trace for one realization.
    Converge(Common),
    /// Closed-form vs simulated energy-detection BER.
    BerValidate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides `seed_base`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::new(Default::default())?,
        };
        if let Some(out) = &self.out {
            cfg = cfg.with_output_dir(out);
        }
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed_base(seed);
        }
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Solve(c) => {
            let cfg = c.load()?;
            let out = harness::with_threads(c.threads, || harness::run_solve(&cfg))??;
            for r in &out.records {
                println!(
                    "{:<6} {:<18} power {:.6e} W  outer {:>3}  inner {:>5}  feasible {}",
                    r.system.name(),
                    format!("{:?}", r.status),
                    r.power_w,
                    r.outer_iterations,
                    r.inner_iterations,
                    r.feasible
                );
            }
            println!("wrote {}", out.dir.display());
        }
        Command::Sweep(c) => {
            let cfg = c.load()?;
            let out = harness::with_threads(c.threads, || harness::run_experiment(&cfg))??;
            for row in &out.summary {
                println!(
                    "point {:>3} value {:>8} {:<6} usable {:>4}/{:<4} mean {:.6e} W ({:.2} dBm)",
                    row.point,
                    row.value,
                    row.system.name(),
                    row.n_usable,
                    row.n_runs,
                    row.mean_power_w,
                    row.mean_power_dbm
                );
            }
            println!("wrote {}", out.dir.display());
        }
        Command::Converge(c) => {
            let cfg = c.load()?;
            let out = harness::with_threads(c.threads, || harness::run_convergence(&cfg))??;
            let res = &out.result;
            println!(
                "{} {:?}: outer {} inner {} eq violation {:.3e} power {:.6e} W",
                res.system, res.status, res.outer_iterations, res.inner_iterations, res.eq_violation, res.power
            );
            println!("wrote {}", out.trace_path.display());
        }
        Command::BerValidate(c) => {
            let cfg = c.load()?;
            let rows = harness::with_threads(c.threads, || harness::run_ber_validation(&cfg))??;
            let mut failed = 0;
            for r in &rows {
                println!(
                    "ratio {:<10.6} T {:>3}  closed {:.6e}  mc {:.6e}  3sigma {:.2e}  {}",
                    r.ratio,
                    r.t_symbols,
                    r.closed_form,
                    r.monte_carlo,
                    3.0 * r.sigma,
                    if r.pass { "pass" } else { "FAIL" }
                );
                failed += usize::from(!r.pass);
            }
            println!("wrote {}", cfg.output_dir().join("ber_validation.csv").display());
            if failed > 0 {
                bail!("{failed} BER validation rows outside 3 sigma");
            }
        }
    }
    Ok(())
}
