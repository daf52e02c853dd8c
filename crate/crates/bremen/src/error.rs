use thiserror::Error;

pub type Result<T> = std::result::Result<T, BremenError>;

#[derive(Debug, Error)]
pub enum BremenError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("Riccati iteration failed to converge after {0} iterations")]
    RiccatiDiverged(usize),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("deployment {index}: {source}")]
    Deployment {
        index: usize,
        #[source]
        source: Box<BremenError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BremenError {
    pub fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        BremenError::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn in_deployment(self, index: usize) -> Self {
        BremenError::Deployment {
            index,
            source: Box::new(self),
        }
    }
}
