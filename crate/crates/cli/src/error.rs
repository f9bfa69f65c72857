use harmonia_core::HarmoniaError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] HarmoniaError),
}

impl CliError {
    pub fn format(msg: impl Into<String>) -> Self {
        Self::Format(msg.into())
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 for unreadable or malformed input, 3 for shape and config
    /// problems, 4 when an internal check fails.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Format(_) | CliError::Io { .. } => 2,
            CliError::Shape(_) | CliError::Config(_) => 3,
            CliError::Invariant(_) => 4,
            CliError::Core(e) => match e {
                HarmoniaError::Invariant(_) | HarmoniaError::CalibrationDiverged { .. } => 4,
                _ => 3,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::format("x").exit_code(), 2);
        assert_eq!(CliError::Shape("x".into()).exit_code(), 3);
        assert_eq!(
            CliError::from(HarmoniaError::Tiling("x".into())).exit_code(),
            3
        );
        assert_eq!(
            CliError::from(HarmoniaError::Config("x".into())).exit_code(),
            3
        );
        assert_eq!(
            CliError::from(HarmoniaError::Invariant("x".into())).exit_code(),
            4
        );
        assert_eq!(CliError::Invariant("x".into()).exit_code(), 4);
    }
}
