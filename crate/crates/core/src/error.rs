use thiserror::Error;

/// Errors raised anywhere in the pipeline. The display string always starts
/// with the module that produced it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor: shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("tensor: non-finite input")]
    NonFinite,

    #[error("tensor: empty key set")]
    EmptyKeySet,

    #[error("tensor: loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor: unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("embed: {extent} = {value} is not divisible by patch size {patch}")]
    Indivisible {
        extent: &'static str,
        value: usize,
        patch: usize,
    },

    #[error("embed: {0}")]
    Embed(String),

    #[error("config: {0}")]
    Config(String),

    #[error("synthgen: {0}")]
    Scene(String),

    #[error("tracker: {0}")]
    Tracker(String),

    #[error("tracker: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("evalkit: {0}")]
    Eval(String),

    #[error("format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
