mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use igrad::metrics::ClassPolicy;
use igrad::Error;

#[derive(Parser)]
#[command(name = "igrad", version, about = "Train CNNs with aligned standard and guided input gradients, and evaluate their saliency maps")]
struct Cli {
    /// Run every data-parallel stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model as described by a run config.
    Train { config: PathBuf },
    /// Score saliency methods on the test split and write metrics.csv.
    Eval {
        config: PathBuf,
        checkpoint: PathBuf,
        /// Overrides saliency.class_policy from the config.
        #[arg(long, value_parser = parse_policy)]
        class_policy: Option<ClassPolicy>,
    },
    /// Write saliency overlays and input-gradient maps for test images.
    Saliency {
        config: PathBuf,
        checkpoint: PathBuf,
        /// Comma-separated test-split indices.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<usize>,
    },
    /// Check every backward rule against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        seeds: u64,
        /// Corrupt one op's backward rule to exercise the gate.
        #[arg(long, hide = true)]
        fault_op: Option<String>,
    },
}

fn parse_policy(s: &str) -> Result<ClassPolicy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Exit code for a failed command.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } => 3,
        Error::Shape { .. } | Error::Backward(_) | Error::Metrics(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var("IGRAD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if !igrad::exec::configure_threads(n) {
            log::warn!("IGRAD_THREADS={n} ignored: thread pool already configured");
        }
    }
    let exec = if cli.sequential { igrad::Execution::Sequential } else { igrad::Execution::Parallel };
    let result = match cli.command {
        Command::Train { config } => commands::train(&config, exec),
        Command::Eval { config, checkpoint, class_policy } => commands::eval(&config, &checkpoint, class_policy, exec),
        Command::Saliency { config, checkpoint, ids } => commands::saliency(&config, &checkpoint, &ids),
        Command::Gradcheck { seeds, fault_op } => commands::gradcheck(seeds, fault_op),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
