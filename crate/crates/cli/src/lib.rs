//! The `lucent` command-line tool.

pub mod commands;
pub mod config;

use commands::{Failure, EXIT_OK};
use config::{Cli, Command, Settings};

/// Sets the worker count from `LUCENT_THREADS` when present.
pub fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("LUCENT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("LUCENT_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure {
            code: commands::EXIT_INTERNAL,
            message: e.to_string(),
        })
}

/// Runs a parsed command line, returning the exit code.
pub fn run(cli: &Cli) -> i32 {
    let result = configure_threads().and_then(|()| {
        let settings = Settings::resolve(&cli.opts).map_err(Failure::usage)?;
        match cli.command {
            Command::Init => commands::cmd_init(&settings),
            Command::Train => commands::cmd_train(&settings),
            Command::Enhance => commands::cmd_enhance(&settings),
            Command::Evaluate => commands::cmd_evaluate(&settings),
            Command::Inspect => commands::cmd_inspect(&settings),
        }
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
