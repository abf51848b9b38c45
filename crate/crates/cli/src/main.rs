use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod run;

use run::{CliError, EvalMode};

/// Latent-token GRPO laboratory on synthetic modular arithmetic.
///
/// Output files go under `$LATENT_GRPO_OUTPUT_ROOT/<run.output_dir>`
/// (the root defaults to the working directory).
#[derive(Parser, Debug)]
#[command(name = "latent-grpo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Fault {
    MissingFlip,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the default configuration as TOML.
    InitConfig,
    /// Supervised warmup; writes a checkpoint once the gate passes.
    Warmup {
        #[arg(long)]
        config: PathBuf,
        /// Keep the checkpoint and exit 0 even if the gate fails.
        #[arg(long)]
        no_gate: bool,
    },
    /// RL training from the warmup checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// latent_grpo, soft_grpo or explicit_grpo.
        #[arg(long, default_value = "latent_grpo")]
        algorithm: String,
        /// Continue from the latest checkpoint of this algorithm.
        #[arg(long)]
        resume: bool,
        /// Initial parameters (defaults to the run's warmup checkpoint).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Stop after this many steps in this invocation.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Evaluate a checkpoint on held-out prompts.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "no-sampling")]
        mode: EvalMode,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        noise: Option<f64>,
        /// Include per-prompt outcomes in the report.
        #[arg(long)]
        per_prompt: bool,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Randomized gradient-identity suite for the latent surrogates.
    VerifyGradients {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Warmup plus training for several seeds and variants.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Variants: latent_grpo, soft_grpo, explicit_grpo, no_one_sided,
        /// no_selection, no_masking.
        #[arg(long, value_delimiter = ',', default_value = "latent_grpo,no_one_sided,no_selection")]
        variants: Vec<String>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::InitConfig => {
            print!("{}", latent_grpo::config::RunConfig::default().to_toml_string());
            Ok(())
        }
        Command::Warmup { config, no_gate } => run::cmd_warmup(&config, !no_gate),
        Command::Train { config, algorithm, resume, init, max_steps } => {
            run::cmd_train(&config, &algorithm, resume, init.as_deref(), max_steps)
        }
        Command::Eval { config, checkpoint, mode, k, n, noise, per_prompt, out } => {
            run::cmd_eval(&config, &checkpoint, mode, k, n, noise, per_prompt, out.as_deref())
        }
        Command::VerifyGradients { trials, seed, inject_fault } => {
            let fault = match inject_fault {
                Some(Fault::MissingFlip) => latent_grpo::verify::Fault::MissingFlip,
                None => latent_grpo::verify::Fault::None,
            };
            run::cmd_verify_gradients(trials, seed, fault)
        }
        Command::Sweep { config, seeds, variants } => run::cmd_sweep(&config, &seeds, &variants),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
