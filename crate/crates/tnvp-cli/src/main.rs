use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tnvp_cli::commands::{
    self, build_version, cmd_eval, cmd_selfcheck, cmd_synthesize, cmd_train, SynthesisInput,
};
use tnvp_cli::exit_code_for;
use tnvp_core::{all_passed, FaultInjection};

#[derive(Parser)]
#[command(
    name = "tnvp",
    version = build_version(),
    about = "Train, evaluate, and sample invertible stage-sequence models"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train per a JSON run config; writes checkpoint, trace, manifest.
    Train {
        /// Path to the JSON run config ("{}" uses all defaults).
        #[arg(long)]
        config: PathBuf,
    },
    /// Report mean paired NLL on a dataset with a shuffled-pair control.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Directory the metrics file is written into.
        #[arg(long, default_value = "out")]
        output: PathBuf,
        /// Seed for the shuffled-pair control.
        #[arg(long, default_value_t = 0)]
        shuffle_seed: u64,
    },
    /// Push inputs stage by stage through the model chain.
    Synthesize {
        /// Repeatable; give one, or exactly one per stage.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Comma-separated start vector, e.g. "0.5,-0.25".
        #[arg(long, conflicts_with = "dataset")]
        input: Option<String>,
        /// Dataset file; every x_prev becomes a start vector.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// "zero" for the conditional mode, "seed:N" for sampled noise.
        #[arg(long, default_value = "zero")]
        noise: String,
        /// Number of synthesis steps per input.
        #[arg(long, default_value_t = 1)]
        stages: usize,
        #[arg(long, default_value = "out")]
        output: PathBuf,
    },
    /// Run the built-in oracle suite; exits 0 iff every check passes.
    Selfcheck {
        /// Deliberately break inversion to prove the suite can fail.
        #[arg(long, hide = true)]
        inject_inversion_fault: bool,
    },
}

fn run(cmd: Cmd) -> tnvp_core::Result<bool> {
    match cmd {
        Cmd::Train { config } => cmd_train(&config).map(|()| true),
        Cmd::Eval {
            checkpoint,
            dataset,
            output,
            shuffle_seed,
        } => cmd_eval(&checkpoint, &dataset, &output, shuffle_seed).map(|()| true),
        Cmd::Synthesize {
            checkpoint,
            input,
            dataset,
            noise,
            stages,
            output,
        } => {
            let source = match (input, dataset) {
                (Some(text), None) => SynthesisInput::Vector(commands::parse_vector(&text)?),
                (None, Some(path)) => SynthesisInput::Dataset(path),
                (None, None) => {
                    return Err(tnvp_core::Error::invalid(
                        "give either --input or --dataset",
                    ))
                }
                (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
            };
            let noise = commands::parse_noise(&noise)?;
            cmd_synthesize(&checkpoint, source, noise, stages, &output).map(|()| true)
        }
        Cmd::Selfcheck {
            inject_inversion_fault,
        } => {
            let fault = FaultInjection {
                flip_inverse_translation: inject_inversion_fault,
            };
            Ok(all_passed(&cmd_selfcheck(fault)))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
