use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cvt_core::evaluation::Protocol;
use cvt_core::trainer::Method;
use cvt_experiment::runner::run_experiment_with_progress;
use cvt_experiment::{emit_report, ExperimentConfig, ExperimentError};

#[derive(Parser)]
#[command(name = "cvt", version, about = "Online continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    #[value(name = "task_free", alias = "task-free")]
    TaskFree,
    #[value(name = "task_aware", alias = "task-aware")]
    TaskAware,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every configured method and seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this method.
        #[arg(long)]
        method: Option<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_enum)]
        protocol: Option<ProtocolArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write curves and a markdown table from a finished run directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn run(command: Command) -> Result<(), ExperimentError> {
    match command {
        Command::Run {
            config,
            method,
            seeds,
            protocol,
            out,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(m) = method {
                cfg.methods = vec![m.parse::<Method>()?];
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(p) = protocol {
                cfg.protocols = match p {
                    ProtocolArg::TaskFree => vec![Protocol::TaskFree],
                    ProtocolArg::TaskAware => vec![Protocol::TaskAware],
                    ProtocolArg::Both => Protocol::ALL.to_vec(),
                };
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let summary = run_experiment_with_progress(&cfg, |r| {
                let parts: Vec<String> = r
                    .results
                    .iter()
                    .map(|p| format!("{} A_T {:.2}", p.protocol, p.overall_accuracy))
                    .collect();
                eprintln!("{} seed {}: {}", r.method, r.seed, parts.join(", "));
            })?;
            eprintln!(
                "{} methods written to {}",
                summary.methods.len(),
                cfg.output_dir.display()
            );
            Ok(())
        }
        Command::Report { input } => {
            let files = emit_report(&input)?;
            println!("{}", files.table.display());
            for p in files.plots {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
