//! `advblur` command-line driver.
//!
//! Exit codes: 0 on success, 1 when the configuration or input data is
//! invalid (the message names the offending key), 2 on any runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use commands::{Command, RootLock};
use config::{ConfigError, RunConfig, OUT_ENV};

#[derive(Debug, Parser)]
#[command(name = "advblur", version, about = "Adversarial-blur training and evaluation pipeline")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=3`. Values parse as JSON, else as strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Validate and print the plan without touching the filesystem.
    #[arg(long)]
    dry_run: bool,
    /// Print the fully resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some() || e.downcast_ref::<advblur::Error>().is_some_and(|e| e.is_validation())
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let env_out = std::env::var(OUT_ENV).ok();
    let cfg = match RunConfig::resolve(cli.config.as_deref(), env_out.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if cli.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serialises"));
        return ExitCode::SUCCESS;
    }
    if cli.dry_run {
        println!("plan for `{}` (dry run, nothing is written):", cli.command.name());
        for (i, step) in commands::plan(cli.command, &cfg).iter().enumerate() {
            println!("  {}. {step}", i + 1);
        }
        return ExitCode::SUCCESS;
    }
    let result = RootLock::acquire(&cfg.output_root).and_then(|_lock| commands::run(cli.command, &cfg));
    match result {
        Ok(summary) => {
            log::info!("{} finished: {}", cli.command.name(), summary["result"]);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
