use clap::{Args, Parser, Subcommand};
use filterprune_cli::config::{parse_config, RunConfig};
use filterprune_cli::{dispatch, CliError, Command, Invocation};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "filterprune",
    version,
    about = "Learned-score filter pruning for CIFAR ResNets"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Dense training with all scores at 1.
    Warmup(Common),
    /// Alternating score and weight phases.
    Prune(Common),
    /// Physically remove gated filters and certify the result.
    Extract(Common),
    /// Train the extracted network.
    Finetune(Common),
    /// Budget tables, JSON report and charts for the latest checkpoint.
    Report(Common),
    /// Numerical property suite.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Smaller trial counts.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; documented defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed, overriding `data.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Input checkpoint directory in place of the stage default.
    #[arg(long)]
    resume: Option<PathBuf>,
}

fn invocation(cli: Cli) -> Result<Invocation, CliError> {
    let (command, common, quick) = match cli.command {
        Cmd::Warmup(c) => (Command::Warmup, c, false),
        Cmd::Prune(c) => (Command::Prune, c, false),
        Cmd::Extract(c) => (Command::Extract, c, false),
        Cmd::Finetune(c) => (Command::Finetune, c, false),
        Cmd::Report(c) => (Command::Report, c, false),
        Cmd::Verify { common, quick } => (Command::Verify, common, quick),
    };
    let mut config = match &common.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = common.out {
        config.output.dir = out;
    }
    if let Some(seed) = common.seed {
        config.data.seed = seed;
    }
    config.data.root = filterprune_cli::data::data_root(&config.data);
    Ok(Invocation {
        command,
        config,
        resume: common.resume,
        quick,
        stop_after_phases: None,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = invocation(cli).and_then(|inv| dispatch(&inv));
    match result {
        Ok(outcome) => {
            for l in &outcome.lines {
                println!("{l}");
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
