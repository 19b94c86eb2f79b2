use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid dimensions, out-of-range arguments or incompatible options.
    #[error("configuration error: {0}")]
    Config(String),
    /// A NaN or infinity showed up in a loss or gradient.
    #[error("numerical error at iteration {iteration}: {detail}")]
    Numerical { iteration: usize, detail: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
