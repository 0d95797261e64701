//! `excontrol`: estimate, diagnose, simulate and report from the command line.
//!
//! Results are JSON on stdout (or `--out`); logs go to stderr. Failures print
//! `{"error": {"code", "class", "message"}}` and exit with 2 (configuration),
//! 3 (data) or 4 (numeric).

mod commands;
mod config;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use excontrol::{Error, ErrorClass};

use config::{Cli, Command, RunConfig};

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn fail(err: &Error) -> ExitCode {
    let mut body = json!({
        "code": err.code().as_str(),
        "class": err.class(),
        "message": err.to_string(),
    });
    if let Error::NonConvergence { trace, .. } = err {
        body["trace"] = json!(trace);
    }
    println!("{}", json!({ "error": body }));
    ExitCode::from(exit_code(err.class()))
}

fn write_output(out: Option<&std::path::Path>, text: &str) -> excontrol::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn run(command: &Command) -> excontrol::Result<()> {
    let cfg = RunConfig::resolve(command.name(), command.flags())?;
    let out = cfg.out.clone();
    let text = match command {
        Command::Estimate(_) => pretty(commands::cmd_estimate(cfg)?)?,
        Command::Diagnose(_) => pretty(commands::cmd_diagnose(cfg)?)?,
        Command::Simulate(_) => pretty(commands::cmd_simulate(cfg)?)?,
        Command::Report(_) => commands::cmd_report(&cfg)?,
    };
    write_output(out.as_deref(), &text)
}

fn pretty(v: serde_json::Value) -> excontrol::Result<String> {
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return fail(&Error::Config(e.kind().to_string()));
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            fail(&e)
        }
    }
}
