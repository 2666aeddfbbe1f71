use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] evbridge_core::Error),
    #[error(transparent)]
    Autodiff(#[from] evbridge_autodiff::Error),
    #[error("invalid config: {0}")]
    Config(String),
    /// A loss term became NaN or infinite during training.
    #[error("non-finite loss term '{term}' = {value} at iteration {iteration}")]
    NonFinite {
        term: &'static str,
        value: f64,
        iteration: u64,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
