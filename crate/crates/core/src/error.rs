use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("target frame {target} needs {needed} frames of history")]
    InsufficientHistory { target: usize, needed: usize },

    #[error("no random-frame candidate: all {video_len} frames are in the clip")]
    NoRandomCandidate { video_len: usize },

    #[error("target frame {target} is outside a video of {video_len} frames")]
    FrameOutOfRange { target: usize, video_len: usize },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("malformed json in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("mask {} contains label {value}, not in a {num_classes}-class vocabulary (ignore = {ignore})", path.display())]
    InvalidMask { path: PathBuf, value: u8, num_classes: usize, ignore: u8 },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input {h}x{w} is not divisible by {divisor}")]
    IndivisibleInput { h: usize, w: usize, divisor: usize },

    #[error("template {0:?} must contain exactly one {{}} placeholder")]
    MalformedTemplate(String),

    #[error("{channels} channels cannot be split into {heads} heads")]
    HeadsNotDivisible { channels: usize, heads: usize },

    #[error("empty clip")]
    EmptyClip,

    #[error("unknown config key {key:?}; valid keys: {}", valid.join(", "))]
    UnknownConfigKey { key: String, valid: Vec<String> },

    #[error("bad value {value:?} for config key {key:?}: {reason}")]
    ConfigValue { key: String, value: String, reason: String },

    #[error("class filter selects no classes with pixels")]
    EmptyClassFilter,

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u8, num_classes: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),

    #[error("non-finite loss at iteration {iteration} (batch seed {batch_seed})")]
    NonFiniteLoss { iteration: usize, batch_seed: u64 },

    #[error("output directory {} exists and is not empty", .0.display())]
    OutputExists(PathBuf),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}
