use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad arguments, malformed specs, out-of-range values.
    #[error("invalid input: {0}")]
    Input(String),

    /// Parse failure in a data or config file, with the offending line.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{context} is not positive definite{detail}")]
    NotPositiveDefinite { context: String, detail: String },

    /// Inner Newton-Raphson exceeded its iteration cap.
    #[error(
        "newton-raphson did not converge after {iterations} iterations \
         (gradient norm {grad_norm:.3e}, last iterate {last:?})"
    )]
    NewtonDiverged {
        iterations: usize,
        grad_norm: f64,
        last: Vec<f64>,
    },

    #[error("singular design: {0}")]
    SingularDesign(String),

    /// Underflow, overflow, or a degenerate quantity that should not occur
    /// with shifted log-space arithmetic.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn not_pd(context: impl Into<String>, detail: impl Into<String>) -> Self {
        let detail = detail.into();
        Error::NotPositiveDefinite {
            context: context.into(),
            detail: if detail.is_empty() {
                String::new()
            } else {
                format!(" ({detail})")
            },
        }
    }

    /// True for errors caused by caller-supplied data or configuration, as
    /// opposed to numerical trouble encountered mid-computation.
    pub fn is_input(&self) -> bool {
        matches!(self, Error::Input(_) | Error::Parse { .. } | Error::Io(_))
    }
}
