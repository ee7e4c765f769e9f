use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mrff::cli::{self, verify, EXIT_CONFIG, EXIT_FAILURE};
use mrff::tensor::BackwardFault;

#[derive(Parser)]
#[command(name = "mrff", version, about = "Federated group-gated CTR experiments")]
struct Args {
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one federation and write metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// One run per value of an axis (alpha, groups or noise).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
    },
    /// Gradient, balance, aggregation and privacy self-checks.
    Verify {
        /// Flip the sign of one operation's gradient to see the suite fail.
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
    },
}

fn fail(e: mrff::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(cli::exit_code(&e) as u8)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match args.cmd {
        Cmd::Run { config } => match cli::cmd_run(&config, args.out.as_deref(), args.seed) {
            Ok(r) => {
                println!("wrote {}", r.out_dir.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Cmd::Sweep { config, axis, values } => {
            match cli::cmd_sweep(&config, &axis, &values, args.out.as_deref(), args.seed) {
                Ok(cells) => {
                    let axis: cli::SweepAxis = axis.parse().expect("validated");
                    print!("{}", cli::sweep_table(axis, &cells));
                    if cells.iter().all(|c| c.outcome.is_ok()) {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_FAILURE as u8)
                    }
                }
                Err(e) => fail(e),
            }
        }
        Cmd::Verify { inject_fault } => {
            let fault = match inject_fault.as_deref().map(|n| (n, BackwardFault::parse(n))) {
                None => None,
                Some((_, Some(f))) => Some(f),
                Some((n, None)) => {
                    let known: Vec<&str> = BackwardFault::ALL.iter().map(|f| f.name()).collect();
                    eprintln!("error: unknown operation {n:?}; one of {}", known.join(", "));
                    return ExitCode::from(EXIT_CONFIG as u8);
                }
            };
            let checks = verify::run_verify(fault);
            print!("{}", verify::render_checks(&checks));
            if checks.iter().all(|c| c.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAILURE as u8)
            }
        }
    }
}
