use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no feasible stride: video of {video_len} frames needs at least {min_required} frames for clip length {clip_len}")]
    Infeasible {
        video_len: usize,
        clip_len: usize,
        min_required: usize,
    },
    #[error("label {label} at pixel {pixel} is outside [0, {num_classes}) and is not the ignore id")]
    LabelOutOfRange {
        pixel: usize,
        label: u8,
        num_classes: usize,
    },
    #[error("mean is undefined: no class has ground-truth pixels")]
    UndefinedMean,
    #[error("evaluation protocol error: {0}")]
    Protocol(String),
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
