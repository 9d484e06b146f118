use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fttnn_cli::commands::{self, CliError, SliceRequest};
use fttnn_cli::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "fttnn", version, about = "Functional tensor-train neural network PDE solver")]
struct Cli {
    /// Worker threads for parallel loss evaluation (results do not depend on it).
    #[arg(long, env = "FTTNN_THREADS", global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per a TOML config; writes metrics.csv, the model and summary.json.
    Run {
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Resolve a config and print the settings a run would use.
    Validate { config: PathBuf },
    /// List the built-in problems with their rank and hidden width.
    ListProblems,
    /// Write a 2-D slice of a saved model as CSV.
    ExportSlice {
        checkpoint: PathBuf,
        #[arg(long)]
        problem: String,
        /// The two free dimensions, zero-based, e.g. `0,1`.
        #[arg(long, value_delimiter = ',', required = true)]
        free: Vec<usize>,
        /// Fixed coordinates `DIM=VALUE` (zero-based); unlisted ones sit at the box midpoint.
        #[arg(long = "fix", value_parser = commands::parse_fixed)]
        fixed: Vec<(usize, f64)>,
        #[arg(long, default_value_t = 101)]
        resolution: usize,
        /// Output file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Report losses and errors of a saved model against a problem, as JSON.
    EvalCheckpoint {
        checkpoint: PathBuf,
        #[arg(long)]
        problem: String,
        /// `grid:N` or `random:N[:SEED]`; defaults to the problem's standard set.
        #[arg(long)]
        eval: Option<String>,
    },
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, CliError> {
    Ok(ExperimentConfig::load(path)?)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("FTTNN_THREADS: must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Other(e.to_string()))?;
    }
    match cli.command {
        Command::Run { config, output } => {
            let cfg = load_config(&config)?;
            let s = commands::run(&cfg, output.as_deref())?;
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4e}"));
            println!(
                "{} [{}]: loss {}, relative error {}, lambda {}, {:.1} s",
                s.problem,
                s.method,
                fmt(s.final_loss),
                fmt(s.rel_error),
                s.lambda.map_or("-".to_string(), |x| format!("{x:.6}")),
                s.wall_time_s
            );
        }
        Command::Validate { config } => print!("{}", commands::validate(&load_config(&config)?)?),
        Command::ListProblems => print!("{}", commands::list()),
        Command::ExportSlice { checkpoint, problem, free, fixed, resolution, output } => {
            let [a, b] = free[..] else {
                return Err(CliError::Config(format!("--free: expected two dimensions, got {}", free.len())));
            };
            let model = commands::load_checkpoint(&checkpoint)?;
            let spec = commands::problem(&problem)?;
            let req = SliceRequest { problem, free: [a, b], fixed, resolution };
            let csv = commands::export_slice(&model, &spec, &req)?;
            match output {
                Some(p) => std::fs::write(&p, csv).map_err(|e| CliError::Other(format!("{}: {e}", p.display())))?,
                None => print!("{csv}"),
            }
        }
        Command::EvalCheckpoint { checkpoint, problem, eval } => {
            let model = commands::load_checkpoint(&checkpoint)?;
            let spec = commands::problem(&problem)?;
            let eval = match eval {
                Some(s) => commands::parse_eval(&s)?,
                None => fttnn::problems::EvalSpec::default_for(spec.dim()),
            };
            let report = commands::eval_checkpoint(&model, &spec, eval)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors, matching the config-error code.
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::from(commands::EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
