use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("solver failure: {message} (residual {residual:.3e})")]
    Solver { message: String, residual: f64 },
    #[error("scenario generation failed: {0}")]
    Generation(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn solver(msg: impl Into<String>, residual: f64) -> Self {
        Error::Solver {
            message: msg.into(),
            residual,
        }
    }
}
