use clap::{Parser, Subcommand};
use goursat_cli::{cmd_analyze, cmd_jet, cmd_reconstruct, cmd_solve, CliError, Report};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Contact-geometric analysis of scalar second-order PDEs: characteristic
/// classification, Goursat-type Monge-Ampère reconstruction, Cauchy solving
/// by Hamiltonian characteristics, and formal jet solutions.
#[derive(Parser)]
#[command(name = "goursat", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pointwise analysis: residual, conformal metric, characteristics, type label
    Analyze(Args),
    /// Recover the distributions D, D⊥ (and B where transversal) from the equation
    Reconstruct(Args),
    /// Solve a Cauchy problem by the method of characteristics (writes surface.csv)
    Solve(Args),
    /// Truncated formal power-series solution (writes jets.json)
    Jet(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Problem file (JSON)
    problem: PathBuf,
    /// Output directory for report.json and artifacts
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn load(path: &Path) -> Result<goursat_cli::ProblemFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
    goursat_cli::ProblemFile::from_json(&text)
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

fn emit_report(report: &Report, out: &Path) -> Result<(), CliError> {
    let text = report.to_json_pretty();
    write_out(out, "report.json", &text)?;
    println!("{text}");
    Ok(())
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Analyze(args) => {
            let problem = load(&args.problem)?;
            let report = cmd_analyze(&problem)?;
            emit_report(&report, &args.out)
        }
        Command::Reconstruct(args) => {
            let problem = load(&args.problem)?;
            let report = cmd_reconstruct(&problem)?;
            emit_report(&report, &args.out)
        }
        Command::Solve(args) => {
            let problem = load(&args.problem)?;
            let (report, artifacts) = cmd_solve(&problem)?;
            write_out(&args.out, "surface.csv", &artifacts.csv)?;
            emit_report(&report, &args.out)
        }
        Command::Jet(args) => {
            let problem = load(&args.problem)?;
            let (report, table) = cmd_jet(&problem)?;
            let json = serde_json::to_string_pretty(&table)
                .map_err(|e| CliError::io(e.to_string()))?;
            write_out(&args.out, "jets.json", &json)?;
            emit_report(&report, &args.out)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
