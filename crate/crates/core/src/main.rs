use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dgcl::config::RunConfig;
use dgcl::experiment::{self, GradcheckOptions};
use dgcl::Error;

#[derive(Parser)]
#[command(name = "dgcl", version, about = "Online continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (method, lambda, memory, seed) cell of a config.
    Run { config: PathBuf },
    /// Compare analytic and finite-difference gradients of every loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Paired drift curves for KISP at lambda 0 and the configured lambda.
    Drift { config: PathBuf },
}

fn load(path: &PathBuf) -> Result<RunConfig, ExitCode> {
    RunConfig::load(path).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        match e {
            Error::Io(_) => ExitCode::from(1),
            _ => ExitCode::from(2),
        }
    })
}

fn threads() -> Option<usize> {
    std::env::var("DGCL_THREADS").ok().and_then(|v| v.parse().ok())
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config } => {
            let config = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match experiment::cmd_run(&config, threads()) {
                Ok(report) => {
                    for cell in &report.cells {
                        println!(
                            "{:<8} lambda={:<5} M={:<3} FA={:.4}±{:.4} FM={}",
                            cell.method.to_string(),
                            cell.lambda,
                            cell.memory,
                            cell.fa.mean,
                            cell.fa.ci95,
                            cell.fm.map_or("-".to_string(), |fm| format!("{:.4}±{:.4}", fm.mean, fm.ci95)),
                        );
                    }
                    println!("wrote {}", config.output_dir().display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Gradcheck { seed } => match experiment::gradcheck(seed, GradcheckOptions::default()) {
            Ok(report) => {
                for e in &report.entries {
                    let verdict = if e.max_rel_error < report.tolerance { "ok" } else { "FAIL" };
                    println!("{:<6} instances={} max_rel_error={:.3e} {verdict}", e.loss, e.instances, e.max_rel_error);
                }
                if report.passed() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
        Command::Drift { config } => {
            let config = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match experiment::cmd_drift(&config) {
                Ok(report) => {
                    let last = |r: &experiment::CellResult| r.drift.last().unwrap_or(0.0);
                    println!("final drift lambda=0: {:.6}", last(&report.baseline));
                    println!("final drift lambda={}: {:.6}", report.lambda, last(&report.regularized));
                    println!("wrote {}", report.dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
