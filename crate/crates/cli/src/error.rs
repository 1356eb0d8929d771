use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] mgbrnn::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 config, 3 numeric failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

fn core_exit_code(e: &mgbrnn::Error) -> i32 {
    use mgbrnn::Error as E;
    match e {
        E::AtStep { source, .. } => core_exit_code(source),
        E::Io { .. } | E::Csv { .. } => 4,
        E::Config(_) | E::Inapplicable(_) | E::Empty(_) => 2,
        _ if e.is_numeric() => 3,
        _ => 2,
    }
}
