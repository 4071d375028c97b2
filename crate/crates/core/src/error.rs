use thiserror::Error;

#[derive(Debug, Error)]
pub enum FiralError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("round {round}: {source}")]
    InRound {
        round: usize,
        #[source]
        source: Box<FiralError>,
    },
}

impl FiralError {
    /// True for failures caused by the numerics rather than by the caller's input.
    pub fn is_numerical(&self) -> bool {
        match self {
            FiralError::Singular(_) | FiralError::NonFinite(_) => true,
            FiralError::InRound { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub fn in_round(self, round: usize) -> Self {
        FiralError::InRound {
            round,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, FiralError>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(FiralError::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}
