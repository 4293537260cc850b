use thiserror::Error;

pub type Result<T> = std::result::Result<T, DrError>;

#[derive(Debug, Clone, Error)]
pub enum DrError {
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid basis specification: {0}")]
    Basis(String),

    #[error("treatment arm {0} is empty")]
    EmptyArm(u8),

    #[error("zero denominator in {0}")]
    ZeroDenominator(&'static str),

    #[error("singular system in {context} (condition estimate {condition:e})")]
    Singular { context: String, condition: f64 },

    #[error("no convergence after {iterations} iterations (last gradient norm {gradient_norm:e})")]
    NonConvergence { iterations: usize, gradient_norm: f64 },

    #[error("infeasible fit: {0}")]
    Infeasible(String),

    #[error("no valid cell: {0}")]
    NoValidCell(String),

    #[error("configuration errors: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::sync::Arc<std::io::Error>,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl DrError {
    pub fn singular(context: impl Into<String>, condition: f64) -> Self {
        DrError::Singular {
            context: context.into(),
            condition,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DrError::Io {
            path: path.as_ref().display().to_string(),
            source: std::sync::Arc::new(source),
        }
    }
}
