//! Command-line driver for the balanced-metric flow library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bflow::driver::{
    cmd_init, cmd_oracle, cmd_run, cmd_verify_identities, ExperimentSpec, IdentityStatus,
};
use bflow::Error;

#[derive(Parser)]
#[command(
    name = "bflw",
    about = "Geometric flow experiments on flat complex tori",
    long_about = "Runs scalar Monge-Ampere type flows with balanced-metric \
                  diagnostics, verifies the supporting tensor identities \
                  against brute-force oracles, and solves the stationary \
                  equation independently.\n\n\
                  Set BFLW_THREADS to bound worker threads (default: all cores)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration file (TOML, see `bflw init`)
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the seed from the configuration
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory (overrides `out` from the configuration)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<(ExperimentSpec, PathBuf), Error> {
        let mut spec = ExperimentSpec::from_path(&self.config)?;
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        let out = self
            .out
            .clone()
            .or_else(|| spec.out.clone())
            .unwrap_or_else(|| PathBuf::from(&spec.name));
        Ok((spec, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check the tensor identities against randomized brute-force oracles
    VerifyIdentities {
        /// Base seed for the randomized trials
        #[arg(long, value_name = "U64", default_value_t = 0)]
        seed: u64,
        /// Comma-separated complex dimensions, each in 3..=6
        #[arg(long, value_name = "LIST", default_value = "3,4,5", value_delimiter = ',')]
        dims: Vec<usize>,
        /// Random trials per identity and dimension (0 = empty report)
        #[arg(long, value_name = "N", default_value_t = 50)]
        trials: usize,
        /// Optional configuration whose `identities` list selects a subset
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
    },
    /// Run the flow for a configuration, writing CSV, snapshots, and summary
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of evenly spaced intermediate state snapshots
        #[arg(long, value_name = "N", default_value_t = 0)]
        emit_snapshots: usize,
    },
    /// Solve the stationary equation directly with the Newton-Krylov solver
    Oracle {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a commented configuration template (experiment.toml)
    Init {
        /// Directory for the template
        #[arg(long, value_name = "DIR", default_value = ".")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::VerifyIdentities {
            seed,
            dims,
            trials,
            config,
        } => {
            let selection = match config {
                Some(path) => ExperimentSpec::from_path(&path)?.identities,
                None => Vec::new(),
            };
            let report = cmd_verify_identities(seed, &dims, trials, &selection)?;
            print!("{}", report.render());
            let ran = report
                .lines
                .iter()
                .filter(|l| !matches!(l.status, IdentityStatus::Skipped(_)))
                .count();
            if report.all_passed() {
                println!("all {ran} identity checks passed (seed {seed}, {trials} trials each)");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("identity check FAILED");
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Run { cfg, emit_snapshots } => {
            let (spec, out_dir) = cfg.load()?;
            let out = cmd_run(&spec, &out_dir, emit_snapshots)?;
            println!(
                "run {:?}: {} at t = {:.6} after {} steps",
                spec.name, out.outcome, out.final_t, out.steps
            );
            if let Some(detail) = &out.breakdown_detail {
                println!("  breakdown: {detail}");
            }
            println!("  speed uniformity: {:.3e}", out.final_speed_uniformity);
            if let Some(rate) = out.empirical_rate {
                println!("  empirical decay rate: {rate:.4}");
            }
            if out.final_stationary_residual.is_finite() {
                println!(
                    "  stationary residual: {:.3e}",
                    out.final_stationary_residual
                );
            }
            if out.final_ansatz_residual.is_finite() {
                println!("  lift residual: {:.3e}", out.final_ansatz_residual);
            }
            if let Some(gap) = out.oracle_gap {
                println!("  gap to stationary solver: {gap:.3e}");
            }
            println!(
                "  wrote {}, {}, {}",
                out.csv_path.display(),
                out.snapshot_path.display(),
                out.summary_path.display()
            );
            // a breakdown is a reported outcome, not a tool failure
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle { cfg } => {
            let (spec, out_dir) = cfg.load()?;
            match cmd_oracle(&spec, &out_dir) {
                Ok(out) => {
                    println!(
                        "stationary solve converged in {} iterations (residual {:.3e}, c = {:.12})",
                        out.iterations, out.final_residual, out.c
                    );
                    println!(
                        "  wrote {} and {} (round-trip {})",
                        out.snapshot_path.display(),
                        out.history_path.display(),
                        if out.snapshot_roundtrip_ok { "ok" } else { "MISMATCH" }
                    );
                    if out.snapshot_roundtrip_ok {
                        Ok(ExitCode::SUCCESS)
                    } else {
                        Ok(ExitCode::FAILURE)
                    }
                }
                Err(Error::OracleStagnation { history }) => {
                    eprintln!(
                        "stationary solve stagnated after {} iterations; residual history \
                         written to {}",
                        history.len(),
                        out_dir.join("residual_history.csv").display()
                    );
                    Ok(ExitCode::FAILURE)
                }
                Err(e) => Err(e),
            }
        }
        Command::Init { out } => {
            std::fs::create_dir_all(&out)?;
            let path = out.join("experiment.toml");
            cmd_init(&path)?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
