//! `sarcasm`: one binary for corpus statistics, cue removal, the annotation
//! service, training, evaluation and the experiment sweeps.
//!
//! Reports go to stdout as JSON (tables for `stats` and the sweeps unless
//! `--json`). Errors go to stderr as one JSON line and exit nonzero.

mod commands;

use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use commands::Cli;

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(e) = cause.downcast_ref::<sarcasm_core::Error>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<sarcasm_annotate::Error>() {
            return e.kind();
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() {
            return "parse";
        }
        if let Some(e) = cause.downcast_ref::<commands::CheckFailed>() {
            return e.kind();
        }
    }
    "error"
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The cause chain joined with `: `, skipping causes a parent already printed.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    one_line(&out)
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
            let message = one_line(&e.to_string());
            eprintln!("{}", json!({ "error": "usage", "message": message }));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = message(&e);
            eprintln!("{}", json!({ "error": error_kind(&e), "message": message }));
            ExitCode::FAILURE
        }
    }
}
