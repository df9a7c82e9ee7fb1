//! The `cellscope` command line: argument definitions and one function per
//! subcommand. JSON results go to stdout, logs and the resolved
//! configuration to stderr.

pub mod args;
pub mod commands;
pub mod error;

pub use args::{Cli, Command};
pub use error::{CliError, Result};

use serde_json::Value;

/// Key-sorted JSON of everything that determines the run.
pub fn banner(cli: &Cli) -> Value {
    let mut v = serde_json::to_value(&cli.command).expect("arguments serialize");
    v["seed"] = cli.seed.into();
    v
}

/// Runs one command and returns what belongs on stdout.
pub fn run(cli: Cli) -> Result<String> {
    let seed = cli.seed;
    if let Command::Serve(a) = &cli.command {
        let cfg = commands::resolve_service_config(a, |k| std::env::var(k).ok())?;
        eprintln!("resolved config: {}", serde_json::to_value(&cfg).expect("config serializes"));
        commands::serve_cmd(cfg)?;
        return Ok(String::new());
    }
    eprintln!("resolved config: {}", banner(&cli));
    let out = match &cli.command {
        Command::Train(a) => commands::train_cmd(a, seed)?,
        Command::Evaluate(a) => commands::evaluate_cmd(a, seed)?,
        Command::Prune(a) => commands::prune_cmd(a, seed)?,
        Command::Predict(a) => return commands::predict_cmd(a),
        Command::Reconstruct(a) => commands::reconstruct_cmd(a)?,
        Command::Synth(a) => commands::synth_cmd(a, seed)?,
        Command::TrainGen(a) => commands::train_gen_cmd(a, seed)?,
        Command::Serve(_) => unreachable!("handled above"),
    };
    Ok(out.to_string())
}
