//! Spec-file driven front end: one TOML spec per run, artifacts written to a
//! single output directory.

use std::path::{Path, PathBuf};

use thiserror::Error;

mod commands;
pub mod output;
pub mod spec;
pub mod validate;

pub use validate::{validate_path, Diagnostic};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid spec:\n{}", .0.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Diagnostic>),

    #[error(transparent)]
    Core(#[from] hel_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{0}")]
    Message(String),
}

impl RunError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        RunError::Io { path: path.to_path_buf(), source }
    }

    /// Process exit status: 2 for an invalid spec, 1 for a failed run.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Invalid(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Options {
    /// Overrides the spec's output directory.
    pub out: Option<PathBuf>,
    /// Worker threads; `None` uses the rayon default.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
    /// Human-readable summary for the terminal.
    pub console: String,
}

/// Validates and runs a spec.
pub fn run(spec_path: &Path, opts: &Options) -> Result<Outcome, RunError> {
    let loaded = spec::load(spec_path).map_err(|m| RunError::Invalid(vec![Diagnostic { at: "spec".into(), message: m }]))?;
    let diags = validate::validate(&loaded, opts.out.as_deref());
    if !diags.is_empty() {
        return Err(RunError::Invalid(diags));
    }
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = opts.threads {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| RunError::Message(format!("thread pool: {e}")))?;
    pool.install(|| commands::dispatch(&loaded, opts))
}
