use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybridlik_cli::commands::{run, Command};
use hybridlik_cli::config::{Method, Overrides, RunConfig};
use hybridlik_cli::output::{diagnostic, write_json};
use hybridlik_cli::{CliError, EXIT_OK};

/// Hybrid likelihood estimation: parametric likelihood balanced against an
/// empirical likelihood on control parameters.
#[derive(Debug, Parser)]
#[command(name = "hybridlik", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Maximize the hybrid likelihood and report estimates and limit matrices.
    Fit(Common),
    /// Refit over a grid of balance parameters.
    Scan(Common),
    /// Deviance-based confidence curve for the focus parameter.
    Confcurve(Common),
    /// fic risk estimates over balance parameters (needs a wide model).
    Fic(Common),
    /// Goodness-of-fit test against the wide model.
    Gof(Common),
    /// Seeded Monte Carlo replications.
    Simulate(Common),
    /// Empirical likelihood ratio at a parameter value.
    El {
        #[command(flatten)]
        common: Common,
        /// Comma-separated θ; defaults to the ML fit.
        #[arg(long, value_delimiter = ',')]
        theta: Option<Vec<f64>>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Column index or header name.
    #[arg(long)]
    column: Option<String>,
    /// Fixed balance parameter, replacing any policy in the file.
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, env = "HYBRIDLIK_THREADS")]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<Method>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            data: self.data.clone(),
            column: self.column.clone(),
            a: self.a,
            seed: self.seed,
            output_dir: self.output_dir.clone(),
            threads: self.threads,
            method: self.method,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Cmd::Fit(c) => (Command::Fit, c),
        Cmd::Scan(c) => (Command::Scan, c),
        Cmd::Confcurve(c) => (Command::ConfCurve, c),
        Cmd::Fic(c) => (Command::Fic, c),
        Cmd::Gof(c) => (Command::Gof, c),
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::El { common, theta } => (Command::El { theta }, common),
    };
    let mut output_dir = common.output_dir.clone();
    let result = RunConfig::load(&common.config).and_then(|mut cfg| {
        cfg.apply(&common.overrides());
        output_dir = Some(cfg.output_dir.clone());
        run(&command, &cfg)
    });
    match result {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::from(EXIT_OK as u8)
        }
        Err(err) => report(command.name(), &err, output_dir),
    }
}

fn report(command: &str, err: &CliError, output_dir: Option<PathBuf>) -> ExitCode {
    let diag = diagnostic(command, err);
    eprintln!("error: {err}");
    if let Ok(text) = serde_json::to_string(&diag) {
        eprintln!("{text}");
    }
    if err.exit_code() == hybridlik_cli::EXIT_NUMERICAL {
        if let Some(dir) = output_dir {
            if let Err(e) = write_json(&dir, "diagnostic.json", &diag) {
                eprintln!("could not write diagnostic: {e}");
            }
        }
    }
    ExitCode::from(err.exit_code() as u8)
}
