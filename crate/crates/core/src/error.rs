use std::path::PathBuf;

use thiserror::Error;

use crate::syntax::PosTag;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("prompt contains no tokens")]
    EmptyPrompt,
    #[error("corpus unreadable: {path}: {source}")]
    CorpusUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("requested {requested} templates but the table holds only {available}")]
    NotEnoughTemplates { requested: usize, available: usize },
    #[error("no vocabulary bucket for tag {0}")]
    MissingBucket(PosTag),
    #[error("generation backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("generation budget exhausted after accepting {accepted} samples")]
    BudgetExhausted { accepted: usize },
    #[error("perturbation could not escape the trigger template in {attempts} attempts")]
    CannotEscapeTemplate { attempts: usize },
    #[error("insufficient samples: need {needed}, have {available}")]
    InsufficientSamples { needed: usize, available: usize },
    #[error("target prompt matches the trigger template")]
    TargetMatchesTrigger,
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("eigendecomposition did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("matrix is not positive definite (eigenvalue {0:e})")]
    NotSpd(f64),
    #[error("prompt length {len} exceeds maximum {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("prompt length {0} is too short (need at least 2 tokens)")]
    PromptTooShort(usize),
    #[error("unknown token: {0:?}")]
    UnknownToken(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty matrix set")]
    EmptySet,
    #[error("need at least 2 matrices for a bandwidth estimate, got {0}")]
    TooFewMatrices(usize),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("need at least {needed} scores for calibration, got {got}")]
    TooFewScores { needed: usize, got: usize },
    #[error("zero vector in cosine similarity")]
    ZeroVector,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
