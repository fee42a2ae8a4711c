//! `ccsfg`: generate synthetic camera data, train, evaluate and run the
//! comparison sweeps.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (unreadable or malformed files included), 3 training collapse.

mod args;
mod commands;
mod settings;

use std::process::ExitCode;

use clap::error::ErrorKind;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ccsfg_core::Error),
    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        source: ccsfg_core::Error,
    },
}

impl From<ccsfg_core::DataError> for CliError {
    fn from(e: ccsfg_core::DataError) -> Self {
        CliError::Core(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        use ccsfg_core::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) | CliError::File { source: e, .. } => match e {
                E::Config(_) => "config",
                E::Collapse { .. } => "collapse",
                E::Data(_) => "data",
                E::Checkpoint(_) => "checkpoint",
                E::Io(_) => "io",
                E::Json(_) => "json",
                E::Numerics(_) => "numerics",
                E::Invalid(_) => "invalid",
            },
        }
    }

    pub fn code(&self) -> u8 {
        match self.kind() {
            "usage" | "config" => 1,
            "collapse" => 3,
            _ => 2,
        }
    }
}

/// The single machine-readable line written to stderr on failure.
fn error_line(kind: &str, code: u8, message: &str) -> String {
    json!({ "error": kind, "code": code, "message": message }).to_string()
}

fn main() -> ExitCode {
    let matches = match args::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprint!("{}", e.render());
            let first = e.to_string();
            let first = first
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", 1, first));
            return ExitCode::from(1);
        }
    };
    match commands::run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let CliError::Usage(_) = e {
                let name = matches.subcommand_name().unwrap_or("");
                if let Some(sub) = args::command().find_subcommand_mut(name) {
                    eprintln!("{}", sub.clone().bin_name(format!("ccsfg {name}")).render_usage());
                }
            }
            eprintln!("{}", error_line(e.kind(), e.code(), &e.to_string()));
            ExitCode::from(e.code())
        }
    }
}
