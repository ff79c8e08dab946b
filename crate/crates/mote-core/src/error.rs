//! Crate-wide error type.
//!
//! Variants are deliberately fine-grained: callers (and the CLI) match on
//! them to decide between "bad input" and "corrupt artifact" situations.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Operand shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// RTN quantization asked for a bit width other than 4 or 8.
    #[error("unsupported bit width {0}: expected 4 or 8")]
    UnsupportedBitWidth(u32),

    /// A ternary code outside {-1, 0, 1} was handed to the packer.
    #[error("invalid ternary code {code} at ({row}, {col})")]
    InvalidCode { code: i8, row: usize, col: usize },

    /// A packed buffer failed validation (length, reserved bit pattern,
    /// or nonzero padding).
    #[error("corrupt packed weights: {0}")]
    CorruptWeights(String),

    /// The reduction dimension is large enough that the i32 accumulator
    /// could overflow.
    #[error("accumulator overflow risk: k = {k} exceeds {max}")]
    AccumulatorOverflow { k: usize, max: usize },

    /// A token id at or above the vocabulary size.
    #[error("invalid token id {id} for vocab size {vocab}")]
    InvalidToken { id: u32, vocab: usize },

    /// A batch example with an empty answer span.
    #[error("empty answer span in example {0}")]
    EmptyResponse(u64),

    /// An analytics filter matched no tokens.
    #[error("empty selection: {0}")]
    EmptySelection(String),

    /// A config value or combination that cannot be built.
    #[error("config error: {0}")]
    Config(String),

    /// The loss left the realm of finite numbers.
    #[error("non-finite loss at step {step}: lm = {lm}, balance = {balance}")]
    NonFiniteLoss { step: usize, lm: f64, balance: f64 },

    /// Checkpoint manifest is inconsistent with itself or the weight file.
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    /// Checkpoint is missing a tensor the model needs.
    #[error("missing tensor: {0}")]
    MissingTensor(String),

    /// Checkpoint declares a dtype this build does not understand.
    #[error("unsupported dtype: {0}")]
    UnsupportedDtype(String),

    /// IO failure, tagged with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
