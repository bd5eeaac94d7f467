//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch at layer {layer}: expected {expected}, got {got}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("rank-deficient matrix `{name}` (sigma_min/sigma_max = {ratio:.3e})")]
    RankDeficient { name: String, ratio: f64 },

    #[error("linearly dependent outer products at indices {indices:?}")]
    DependentOuterProducts { indices: Vec<usize> },

    #[error("non-finite oracle value at stencil point {point:?}")]
    NonFiniteOracle { point: Vec<f64> },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("no second-order information: all sampled Hessians are zero")]
    NoSecondOrderInformation,

    #[error("saturated sampling law: all Hessians numerically zero")]
    SaturatedSamplingLaw,

    #[error("requested subspace dimension {requested} exceeds {available} available columns")]
    SubspaceTooLarge { requested: usize, available: usize },

    #[error("numerical rank {rank} is below requested subspace dimension {requested}")]
    RankBelowSubspace { rank: usize, requested: usize },

    #[error("singular Gram matrix")]
    SingularGram,

    #[error("need at least {needed} candidates, got {got}")]
    TooFewCandidates { needed: usize, got: usize },

    #[error("last-layer detection requires at least two outputs")]
    LeaveOneOutUnsupported,

    #[error("oracle assignment required for networks with more than 3 layers")]
    OracleAssignmentRequired,

    #[error("gradient descent diverged (loss became non-finite); try a smaller learning rate")]
    Diverged,

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("linear algebra backend error: {0}")]
    Linalg(#[from] ndarray_linalg::error::LinalgError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
