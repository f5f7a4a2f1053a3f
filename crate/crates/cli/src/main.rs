use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use eqcausal_cli::{load_config, run_experiment, CliError, Command};

/// Runs one eqcausal experiment from a JSON config.
#[derive(Parser)]
#[command(name = "eqcausal", version)]
struct Args {
    /// Must match the config's `command` field.
    command: Command,
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(args: Args) -> Result<bool, CliError> {
    let mut cfg = load_config(&args.config)?;
    if cfg.command != args.command {
        return Err(CliError::schema(
            "/command",
            format!("config declares {} but the command line asks for {}", cfg.command.name(), args.command.name()),
        ));
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let manifest = run_experiment(&cfg)?;
    for st in &manifest.stages {
        match &st.error {
            None => eprintln!("{:<12} ok     {:.2}s", st.name, st.seconds),
            Some(e) => eprintln!("{:<12} FAILED {:.2}s  {e}", st.name, st.seconds),
        }
    }
    eprintln!("outputs in {}", cfg.out_dir.display());
    Ok(manifest.success)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match run(args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
