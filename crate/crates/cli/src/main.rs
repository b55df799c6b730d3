use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use safexp::explore::ModelKind;
use safexp_cli::{compare, run, CliError, RunOptions};

#[derive(Parser)]
#[command(name = "safexp", version, about = "Safe-exploration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    #[value(name = "robust")]
    Robust,
    #[value(name = "gp_rbf")]
    GpRbf,
    #[value(name = "gp_matern")]
    GpMatern,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Robust => ModelKind::Robust,
            ModelArg::GpRbf => ModelKind::GpRbf,
            ModelArg::GpMatern => ModelKind::GpMatern,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its logs to a directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's model.
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
    },
    /// Align per-episode cost and violations of runs of the same task.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Output CSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            model,
        } => {
            let report = run(&RunOptions {
                config,
                seed,
                out,
                model: model.map(Into::into),
            })?;
            let s = &report.summary;
            eprintln!(
                "{} {} seed {}: {} episodes, {} violations, {} without a safe candidate -> {}",
                s.task,
                s.model,
                s.seed,
                s.episodes,
                s.violation_count,
                s.no_safe_candidate_count,
                report.out.display()
            );
            Ok(report.exit_code())
        }
        Command::Compare { dirs, out } => {
            match out {
                Some(path) => {
                    let f = File::create(&path)
                        .map_err(|e| CliError::io(path.display().to_string(), e))?;
                    compare(&dirs, BufWriter::new(f))?;
                }
                None => {
                    let stdout = io::stdout();
                    compare(&dirs, stdout.lock())?;
                    let _ = io::stdout().flush();
                }
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
