use std::fmt;

use crate::eim::EimModel;

pub type Result<T> = std::result::Result<T, Error>;

/// Offline pipeline stage, used to tag errors surfaced by training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stage {
    Eim,
    /// First-stage interpolation of one family member.
    Stage1 { member: String },
    /// Second-stage interpolation of the z-vector.
    Stage2,
    Decomposition,
    Greedy,
    Validation,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Eim => write!(f, "eim"),
            Stage::Stage1 { member } => write!(f, "decomp/stage1[{member}]"),
            Stage::Stage2 => write!(f, "decomp/stage2"),
            Stage::Decomposition => write!(f, "decomp"),
            Stage::Greedy => write!(f, "greedy"),
            Stage::Validation => write!(f, "validation"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("non-finite entry at position {0}")]
    NonFinite(usize),

    #[error("singular matrix (pivot {pivot:e} at column {column})")]
    SingularMatrix { column: usize, pivot: f64 },

    #[error("singular reduced system (pivot ratio {ratio:e})")]
    SingularReducedSystem { ratio: f64 },

    #[error("points {0} and {1} of the cloud coincide")]
    ZeroDistance(usize, usize),

    /// The greedy selection ran out of linearly independent directions.
    /// `partial` carries the interpolant truncated at the achieved rank.
    #[error("rank deficient: achieved rank {achieved} of requested {requested}")]
    RankDeficient {
        achieved: usize,
        requested: usize,
        partial: Option<Box<EimModel>>,
    },

    #[error("parameter {name} = {value} outside [{lo}, {hi}]")]
    OutOfDomain {
        name: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("unknown parameter name {0:?}")]
    UnknownParameter(String),

    #[error("[{stage}] {source}")]
    Staged {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("model format: {0}")]
    Format(String),

    #[error("not serializable: {0}")]
    NotSerializable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn at(self, stage: Stage) -> Error {
        Error::Staged {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error with stage tags stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Staged { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn stage(&self) -> Option<&Stage> {
        match self {
            Error::Staged { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
