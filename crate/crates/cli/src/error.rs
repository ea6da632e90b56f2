use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config, allocation file or arguments. Exit code 2.
    #[error("{}:{line}: {message}", file.as_deref().unwrap_or("config"))]
    Config { file: Option<String>, line: usize, message: String },
    #[error("{0}")]
    Usage(String),
    /// The numerical work failed. Exit code 3.
    #[error("solver failure: {0}")]
    Solver(#[from] drstrat_core::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Usage(_) => 2,
            Self::Solver(_) => 3,
            Self::Io(_) => 1,
        }
    }
}
