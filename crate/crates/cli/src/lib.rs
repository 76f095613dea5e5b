//! Command-line front end: configuration, reports and the bundled corpus.

pub mod commands;
pub mod config;
pub mod corpus;
pub mod report;

use std::path::PathBuf;

use sasleak_core::absint::AnalysisError;
use sasleak_core::ir::Diagnostic;
use sasleak_core::oracle::OracleError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}", render_diagnostics(.0))]
    Parse(Vec<Diagnostic>),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
}

fn render_diagnostics(d: &[Diagnostic]) -> String {
    d.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n")
}
