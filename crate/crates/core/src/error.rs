use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The TPS block is singular or too ill-conditioned to solve reliably.
    #[error("singular TPS system (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("descriptors have zero variance")]
    ZeroVariance,

    #[error("training aborted at epoch {epoch}, batch {batch}, pair {source_id} -> {target_id}: {cause}")]
    TrainingAborted {
        epoch: usize,
        batch: usize,
        source_id: String,
        target_id: String,
        cause: Box<Error>,
    },

    #[error("sample {id}: {cause}")]
    Sample { id: String, cause: Box<Error> },

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite<'a>(values: impl IntoIterator<Item = &'a f64>, what: &str) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
