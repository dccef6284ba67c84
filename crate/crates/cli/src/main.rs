//! `solver` — runs switching / reflected-system / complementarity solvers
//! against a JSON instance and reports pass/fail per invariant.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use oblique_cli::{run_command, Command, RunConfig};

#[derive(Parser)]
#[command(name = "solver")]
#[command(
    about = "Solvers for optimal switching and obliquely reflected backward systems on killed Markov chains"
)]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Path to the instance JSON document.
    #[arg(long)]
    instance: PathBuf,
    /// Directory for the report and series artifacts; report prints to
    /// stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed from the instance run section.
    #[arg(long)]
    seed: Option<u64>,
    /// Omit timestamps so reports are byte-identical across runs.
    #[arg(long)]
    no_timestamps: bool,
}

#[derive(Subcommand)]
enum Commands {
    /// Stationary complementarity system by active-set policy iteration.
    SolveQvi(CommonArgs),
    /// Penalized approximations (stationary and on the grid) with gap series.
    SolvePenalized(CommonArgs),
    /// Obliquely reflected backward system on the time grid.
    SolveOblique(CommonArgs),
    /// Switching value by mode-augmented dynamic programming.
    SwitchingValue(CommonArgs),
    /// Brute-force policy enumeration against the dynamic program.
    Oracle(CommonArgs),
    /// Monte Carlo simulation of the extracted optimal strategy.
    Simulate(CommonArgs),
    /// Feynman-Kac verification of the stationary solution.
    FeynmanKac(CommonArgs),
    /// Everything above, with every invariant evaluated.
    ReportAll(CommonArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = match cli.command {
        Commands::SolveQvi(a) => (Command::SolveQvi, a),
        Commands::SolvePenalized(a) => (Command::SolvePenalized, a),
        Commands::SolveOblique(a) => (Command::SolveOblique, a),
        Commands::SwitchingValue(a) => (Command::SwitchingValue, a),
        Commands::Oracle(a) => (Command::Oracle, a),
        Commands::Simulate(a) => (Command::Simulate, a),
        Commands::FeynmanKac(a) => (Command::FeynmanKac, a),
        Commands::ReportAll(a) => (Command::ReportAll, a),
    };
    let cfg = RunConfig {
        instance: args.instance,
        out_dir: args.out,
        seed: args.seed,
        no_timestamps: args.no_timestamps,
    };
    match run_command(cmd, &cfg) {
        Ok(report) => {
            if cfg.out_dir.is_none() {
                match serde_json::to_string_pretty(&report) {
                    Ok(text) => println!("{text}"),
                    Err(e) => {
                        eprintln!("error: serializing report: {e}");
                        return ExitCode::from(2);
                    }
                }
            } else {
                for inv in &report.invariants {
                    println!(
                        "{} {}: {:.3e} (threshold {:.3e})",
                        if inv.pass { "PASS" } else { "FAIL" },
                        inv.name,
                        inv.value,
                        inv.threshold
                    );
                }
            }
            if report.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
