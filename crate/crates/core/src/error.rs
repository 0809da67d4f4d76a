use thiserror::Error;

/// Errors raised by the toolkit.
///
/// The three broad classes map onto CLI exit codes: validation and parameter
/// problems are caller mistakes, numerical errors mean a solver produced
/// something unusable.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// True for errors caused by bad input rather than solver failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::Parameter(_) | Error::Dimension(_) | Error::Format(_))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_square(name: &str, rows: usize, cols: usize) -> Result<()> {
    if rows != cols {
        return Err(Error::Dimension(format!("{name} must be square, got {rows}x{cols}")));
    }
    Ok(())
}

pub(crate) fn check_shape(name: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::Dimension(format!("{name} has shape {}x{}, expected {}x{}", got.0, got.1, want.0, want.1)));
    }
    Ok(())
}
