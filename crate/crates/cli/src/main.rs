//! `mocapfuse` command-line entry point.
//!
//! Exit codes: 0 on success, 1 when a command fails at run time, 2 for usage
//! or configuration errors. Failures print one JSON object on stderr.

mod args;
mod run;

use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use args::{Cli, Command};
use run::Failure;

fn init_logging(config_level: Option<&str>) {
    let env = env_logger::Env::new().filter_or("MOCAPFUSE_LOG", config_level.unwrap_or("warn"));
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth(a) => {
            init_logging(None);
            run::synth(&a)
        }
        Command::Init(a) => {
            let cfg = run::preload_config(&a.input)?;
            init_logging(cfg.log_level.as_deref());
            run::init(&a, cfg)
        }
        Command::Track(a) => {
            let cfg = run::preload_config(&a.input)?;
            init_logging(cfg.log_level.as_deref());
            run::track(&a, cfg)
        }
        Command::Eval(a) => {
            init_logging(None);
            run::eval(&a)
        }
    }
}

fn report(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            eprint!("{text}");
            return report("usage", text.lines().next().unwrap_or_default().trim_start_matches("error: ").to_string(), 2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            report("usage", msg, 2)
        }
        Err(Failure::Runtime(e)) => report("runtime", format!("{e:#}"), 1),
    }
}
