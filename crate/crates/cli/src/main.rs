use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use singlag_cli::commands::{self, CliError, Options};
use singlag_cli::report::Report;

/// Presymplectic analysis of singular Lagrangian systems.
#[derive(Parser)]
#[command(name = "singlag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed for all point sampling [default: 42, or the file's [sampling] seed]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of sample points [default: 25, or the file's [sampling] points]
    #[arg(long, global = true)]
    points: Option<usize>,
    /// Relative singular-value cutoff for the ranks of M and Omega
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Write the report as JSON
    #[arg(long, global = true)]
    json: Option<PathBuf>,
    /// Write the trajectory as CSV (integrate)
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Tableau, kernel and first-order constraint summary at the seed
    Analyze { file: String },
    /// Run the constraint algorithm on the first-order surface
    Constraints { file: String },
    /// Integrate the Euler-Lagrange field left by the constraint algorithm
    Integrate { file: String },
    /// Legendre map, primary constraints, projectability and flow equivalence
    Project { file: String },
    /// Full invariant suite at sampled points
    Verify { file: String },
    /// List the built-in systems
    Examples,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    command: &'a str,
    input: &'a str,
    error: DiagnosticBody,
}

#[derive(Serialize)]
struct DiagnosticBody {
    kind: &'static str,
    message: String,
    line: Option<usize>,
    column: Option<usize>,
}

fn write_json(path: &PathBuf, text: &str) -> Result<(), ExitCode> {
    std::fs::write(path, text).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(2)
    })
}

fn run(cli: &Cli) -> Result<ExitCode, ExitCode> {
    let opts = Options { seed: cli.seed, points: cli.points, tol: cli.tol, csv: cli.csv.clone() };
    type Cmd = fn(&commands::Loaded, &Options) -> Result<Report, CliError>;
    let (name, file, cmd): (&str, &str, Cmd) = match &cli.command {
        Command::Analyze { file } => ("analyze", file, commands::analyze),
        Command::Constraints { file } => ("constraints", file, commands::constraints),
        Command::Integrate { file } => ("integrate", file, commands::integrate),
        Command::Project { file } => ("project", file, commands::project),
        Command::Verify { file } => ("verify", file, commands::verify),
        Command::Examples => {
            let list = commands::examples();
            let width = list.iter().map(|e| e.name.len()).max().unwrap_or(0);
            for e in &list {
                println!("{:<width$}  {}", e.name, e.description);
            }
            if let Some(path) = &cli.json {
                write_json(path, &(serde_json::to_string_pretty(&list).expect("serializes") + "\n"))?;
            }
            return Ok(ExitCode::SUCCESS);
        }
    };
    match commands::load(file).and_then(|l| cmd(&l, &opts)) {
        Ok(report) => {
            print!("{}", report.render());
            if let Some(path) = &cli.json {
                write_json(path, &report.to_json())?;
            }
            Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(path) = &cli.json {
                let (line, column) = e.position().unzip();
                let diag = Diagnostic {
                    command: name,
                    input: file,
                    error: DiagnosticBody { kind: e.kind(), message: e.to_string(), line, column },
                };
                write_json(path, &(serde_json::to_string_pretty(&diag).expect("serializes") + "\n"))?;
            }
            Err(ExitCode::from(e.exit_code() as u8))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(c) | Err(c) => c,
    }
}
