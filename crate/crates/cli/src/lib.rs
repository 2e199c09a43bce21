//! Experiment runner for federated architecture search: configuration,
//! on-disk artifacts and the `fdnas` subcommands.

pub mod artifacts;
pub mod cli;
pub mod commands;
pub mod config;

use std::fmt;

/// An error raised by the runner itself, with a machine-readable kind.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Failure { kind, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

/// The JSON object printed on stderr when a command fails.
pub fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let kind = if let Some(f) = err.downcast_ref::<Failure>() {
        f.kind
    } else if let Some(e) = err.chain().find_map(|c| c.downcast_ref::<fdnas_core::Error>()) {
        e.kind()
    } else if err.chain().any(|c| c.is::<std::io::Error>()) {
        "io"
    } else {
        "error"
    };
    serde_json::json!({ "error": { "kind": kind, "message": format!("{err:#}") } })
}
