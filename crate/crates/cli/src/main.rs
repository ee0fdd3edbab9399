//! `infu`: pretrain, synthesize, fine-tune, sample and evaluate the toy
//! identity-conditioned generator.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error (bad config or
//! checkpoint), 3 runtime failure. Failures print one line to stderr:
//! `infu: error code=<n> kind=<usage|validation|runtime> reason="<text>"`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "infu",
    version,
    about = "Toy identity-preserving rectified-flow generator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed of the command's stage.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base generator from scratch.
    PretrainBase {
        #[command(flatten)]
        common: Common,
        /// Output checkpoint (default `<output_dir>/base.infu`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 1: train the identity branch on single-person single-sample data.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint (default `<output_dir>/base.infu`).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Output checkpoint (default `<output_dir>/stage1.infu`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a filtered multi-sample dataset with a stage-1 model.
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Stage-1 checkpoint (default `<output_dir>/stage1.infu`).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Dataset directory (default `<output_dir>/spms`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 2: fine-tune the branch on a synthesized dataset.
    Sft {
        #[command(flatten)]
        common: Common,
        /// Stage-1 checkpoint (default `<output_dir>/stage1.infu`).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Dataset directory (default `<output_dir>/spms`).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output checkpoint (default `<output_dir>/stage2.infu`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate one image as PPM.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path, or `fresh-init` for freshly initialized weights.
        #[arg(long)]
        ckpt: String,
        /// Identity seed.
        #[arg(long)]
        id_seed: u64,
        /// Target prompt as `hue,position,scale`.
        #[arg(long)]
        prompt: String,
        /// Prompt of the reference image the identity is encoded from
        /// (default: the target prompt).
        #[arg(long)]
        source_prompt: Option<String>,
        /// Euler steps (default: the `[eval]` sampler steps).
        #[arg(long)]
        steps: Option<usize>,
        /// Ignore the identity branch.
        #[arg(long)]
        base_only: bool,
        /// Use a black control image.
        #[arg(long)]
        uncontrolled: bool,
        /// Output image (default `<output_dir>/sample.ppm`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Benchmark a checkpoint on held-out identities over the prompt grid.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint (default `<output_dir>/stage2.infu`).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Ignore the identity branch.
        #[arg(long)]
        base_only: bool,
        /// Report directory (default `<output_dir>/eval`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient, flow-oracle, residual-map and zero-init checks.
    Selftest {
        /// Random draws per gradient check.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::PretrainBase { common, out } => commands::pretrain_base(&common, out),
        Command::Pretrain { common, ckpt, out } => commands::pretrain(&common, ckpt, out),
        Command::Synthesize { common, ckpt, out } => commands::synthesize(&common, ckpt, out),
        Command::Sft {
            common,
            ckpt,
            dataset,
            out,
        } => commands::sft(&common, ckpt, dataset, out),
        Command::Sample {
            common,
            ckpt,
            id_seed,
            prompt,
            source_prompt,
            steps,
            base_only,
            uncontrolled,
            out,
        } => commands::sample(
            &common,
            commands::SampleArgs {
                ckpt,
                id_seed,
                prompt,
                source_prompt,
                steps,
                base_only,
                uncontrolled,
                out,
            },
        ),
        Command::Eval {
            common,
            ckpt,
            base_only,
            out,
        } => commands::eval(&common, ckpt, base_only, out),
        Command::Selftest { seeds } => commands::selftest(seeds),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let reason = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            return CliError::usage(reason).report();
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}
