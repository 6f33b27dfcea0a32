//! Crate-wide error type.
//!
//! Every fallible public function in the library returns [`Result`]. The
//! variants are deliberately specific so callers (and the CLI) can react to
//! the failure class instead of string-matching messages.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the lcam library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An array argument did not have the shape a function requires.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        /// Operation that rejected the input.
        context: &'static str,
        /// Human-readable description of the accepted shape.
        expected: String,
        /// The shape that was actually supplied.
        actual: String,
    },

    /// A class index was outside `0..num_classes`.
    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    /// The requested backbone identifier is not in the model zoo.
    #[error("unknown model '{id}' (known: vgg16, resnet50, tiny-cnn)")]
    UnknownModel { id: String },

    /// The requested split point is not defined for this architecture.
    #[error("split point '{split}' is not defined for model '{model}'")]
    UnsupportedSplit { model: String, split: String },

    /// No weight file was found for a zoo model.
    #[error(
        "no weights for model '{id}' at {path}; place a safetensors export there \
         or point LCAM_MODEL_DIR at the directory holding it"
    )]
    MissingWeights { id: String, path: PathBuf },

    /// A checkpoint was created against a different frozen backbone.
    #[error("backbone digest mismatch: checkpoint was trained against {expected}, current backbone is {actual}")]
    DigestMismatch { expected: String, actual: String },

    /// A file declares a format version this build cannot read.
    #[error("{path}: format version {found} not supported (this build reads version {supported})")]
    FormatVersion {
        path: PathBuf,
        found: String,
        supported: u32,
    },

    /// A structured file (safetensors, npy, json, csv) failed to parse.
    #[error("{path}: {detail}")]
    FileFormat { path: PathBuf, detail: String },

    /// An image file could not be decoded.
    #[error("cannot decode image {path}: {detail}")]
    ImageDecode { path: PathBuf, detail: String },

    /// An I/O failure with the path it concerned.
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Dataset ingestion found no usable images.
    #[error("no usable images under {root}")]
    EmptyDataset { root: PathBuf },

    /// An operation needs ground-truth labels but the manifest has none.
    #[error("dataset manifest carries no class labels (ingest with a class-per-directory layout)")]
    MissingClassLabels,

    /// A configuration value (file, preset or CLI) is invalid.
    #[error("invalid configuration: {detail}")]
    InvalidConfig { detail: String },

    /// An argument violated a documented numeric precondition.
    #[error("invalid argument to {context}: {detail}")]
    InvalidArgument { context: &'static str, detail: String },

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged: non-finite loss at step {step}")]
    Divergence { step: u64 },
}

impl Error {
    /// Wraps an [`std::io::Error`] together with the path being touched.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Shorthand for [`Error::ShapeMismatch`].
    pub fn shape(
        context: &'static str,
        expected: impl Into<String>,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.into(),
            actual: format!("{actual:?}"),
        }
    }
}
