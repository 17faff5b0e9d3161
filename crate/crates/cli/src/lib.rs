//! Library surface of the command-line tool: argument parsing, run
//! configuration, and the command implementations, exposed so integration
//! tests can drive the exact code paths the binary runs.

pub mod args;
pub mod commands;
pub mod config;

use std::path::Path;

use dtm_core::error::{Error, Result};

pub use args::{parse, Cli, Command, USAGE};
pub use config::RunConfig;

/// Loads the config (or defaults), applying the seed override.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

/// Dispatches a parsed invocation; returns the process exit code.
pub fn dispatch(cli: Cli) -> Result<i32> {
    let mut config = resolve_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Verify { suite } => commands::cmd_verify(&config, &suite, &cli.out),
        Command::Pretrain { resume } => {
            commands::cmd_pretrain(&config, &cli.out, resume.as_deref())
        }
        Command::Finetune { base, c, h, a_max } => {
            if let Some(c) = c {
                config.dtm.control_variate = c;
            }
            if let Some(h) = h {
                config.dtm.h = h;
            }
            if let Some(a) = a_max {
                config.dtm.a_max = a;
            }
            commands::cmd_finetune(&config, &base, &cli.out)
        }
        Command::Eval { ckpt, rollouts, temperature, svg } => {
            commands::cmd_eval(&config, &ckpt, &cli.out, rollouts, temperature, svg)
        }
        Command::Info => commands::cmd_info(&config),
    }
}

/// True when the error is a bad invocation rather than a failed run.
pub fn is_usage_error(err: &Error) -> bool {
    matches!(err, Error::Config(msg) if msg.starts_with("unknown suite"))
}
