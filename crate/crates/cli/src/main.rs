//! `antislop`: profile over-used phrasing, generate under a banlist, build
//! FTPO preference data and evaluate the result.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use antislop_core::backend::BackendError;
use antislop_core::sampler::GenerateError;

mod commands;
mod config;
mod io;

#[derive(Debug, Parser)]
#[command(name = "antislop", version, about = "Suppress over-used patterns in model output")]
struct Cli {
    /// YAML config file.
    #[arg(long, global = true, default_value = "config.yaml")]
    config: PathBuf,
    /// Overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Defaults to a run directory under `experiment_base_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `log_level` (also honours RUST_LOG).
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a slop profile and banlist from a corpus.
    Profile,
    /// Generate with backtracking under a banlist.
    Generate,
    /// Turn backtracking events into an FTPO dataset.
    Ftpo,
    /// Compare a treated corpus against a baseline.
    Eval,
    /// Iterate generate and profile, then build FTPO data and evaluate.
    Pipeline,
    /// Print the effective config with defaults filled in.
    ShowConfig,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Profile => "profile",
            Command::Generate => "generate",
            Command::Ftpo => "ftpo",
            Command::Eval => "eval",
            Command::Pipeline => "pipeline",
            Command::ShowConfig => "show-config",
        }
    }
}

fn init_logging(level: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level.to_ascii_lowercase()));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let loaded = config::Config::load(&cli.config)?;
    init_logging(cli.log_level.as_deref().unwrap_or(&loaded.config.log_level));
    if let Command::ShowConfig = cli.command {
        print!("{}", loaded.config.to_yaml());
        return Ok(());
    }
    let mut ctx = commands::Ctx::new(loaded, cli.command.name(), cli.seed, cli.out)?;
    match cli.command {
        Command::Profile => commands::cmd_profile(&mut ctx),
        Command::Generate => commands::cmd_generate(&mut ctx),
        Command::Ftpo => commands::cmd_ftpo(&mut ctx),
        Command::Eval => commands::cmd_eval(&mut ctx),
        Command::Pipeline => commands::cmd_pipeline(&mut ctx),
        Command::ShowConfig => unreachable!(),
    }
}

/// 1 user or config error, 2 backend transport failure, 3 internal error.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(g) = cause.downcast_ref::<GenerateError>() {
            return match g {
                GenerateError::Backend { source, .. } => backend_code(source),
                GenerateError::Config(_) => 1,
                GenerateError::Internal(_) | GenerateError::BacktrackBudget(_) => 3,
            };
        }
        if let Some(b) = cause.downcast_ref::<BackendError>() {
            return backend_code(b);
        }
    }
    1
}

fn backend_code(e: &BackendError) -> u8 {
    match e {
        BackendError::Transport { .. } | BackendError::Parse { .. } => 2,
        BackendError::Config(_) | BackendError::InvalidRequest(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            init_logging("error");
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
