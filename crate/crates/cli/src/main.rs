use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use localness_cli::commands::{self, ReportFormat, TrainArgs};
use localness_cli::CliError;

#[derive(Parser)]
#[command(name = "localness", about = "Gaussian localness attention on synthetic tasks", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder and write a checkpoint plus `loss.csv`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `model.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 3000)]
        steps: usize,
    },
    /// Report token accuracy and n-gram rates of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value_t = 100)]
        batches: usize,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Compare analytic and finite-difference gradients of every parameter.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Export window/center diagnostics, attention traces, and n-gram rates.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        batches: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Train { config, out, seed, steps } => commands::cmd_train(
            &TrainArgs {
                config,
                out,
                seed,
                steps,
            },
            &mut stdout,
        ),
        Command::Eval {
            ckpt,
            task,
            batches,
            format,
        } => {
            let format = match format {
                Format::Text => ReportFormat::Text,
                Format::Csv => ReportFormat::Csv,
            };
            commands::cmd_eval(&ckpt, &task, batches, format, &mut stdout).map(drop)
        }
        Command::Gradcheck { config, tolerance } => commands::cmd_gradcheck(&config, tolerance, &mut stdout).map(drop),
        Command::Analyze {
            ckpt,
            task,
            out,
            batches,
        } => commands::cmd_analyze(&ckpt, &task, &out, batches, &mut stdout).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
