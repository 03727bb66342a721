use std::io;

use thiserror::Error;

/// Errors produced by the enhancement pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate scene: {0}")]
    DegenerateScene(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("zero-power reference signal")]
    ZeroReference,

    #[error("no voiced frames in reference signal")]
    NoVoicedFrames,

    #[error("no recorded forward pass")]
    NoForwardPass,

    #[error("utterance has {frames} frames, limit for through-time training is {limit}")]
    SequenceTooLong { frames: usize, limit: usize },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite<'a, I>(values: I, what: &'static str) -> Result<()>
where
    I: IntoIterator<Item = &'a num_complex::Complex64>,
{
    if values
        .into_iter()
        .all(|z| z.re.is_finite() && z.im.is_finite())
    {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
