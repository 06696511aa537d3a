use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or input files.
    #[error("{0}")]
    Validation(String),
    /// A computed result failed a consistency check.
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invariant(_) => 2,
            _ => 1,
        }
    }
}
