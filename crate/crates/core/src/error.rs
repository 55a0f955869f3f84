use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;
use crate::eval::EvalError;
use crate::merge::MergeError;
use crate::pool::PoolError;
use crate::tensor::TensorError;

/// Any failure of a pipeline stage, tagged with the module it came from.
#[derive(Error, Debug)]
pub enum Error {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("model pool: {0}")]
    Pool(#[from] PoolError),
    #[error("merge: {0}")]
    Merge(#[from] MergeError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// The merge succeeded and its checkpoint was kept; evaluation failed.
    #[error("evaluation failed after saving {}: {source}", saved.display())]
    EvalAfterMerge {
        saved: PathBuf,
        #[source]
        source: EvalError,
    },
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

fn checkpoint_code(e: &CheckpointError) -> i32 {
    match e {
        CheckpointError::UnknownKey(_) => EXIT_VALIDATION,
        _ => EXIT_IO,
    }
}

fn pool_code(e: &PoolError) -> i32 {
    match e {
        PoolError::Checkpoint(c) => checkpoint_code(c),
        PoolError::Tensor(_) | PoolError::NotMergeable(_) => EXIT_VALIDATION,
        PoolError::ZeroNorm(_) => EXIT_NUMERIC,
        PoolError::NoBaseModel
        | PoolError::UnknownModel(_)
        | PoolError::DuplicateModel(_)
        | PoolError::EmptyModelName
        | PoolError::EmptyPool
        | PoolError::InvalidPattern(_) => EXIT_CONFIG,
    }
}

fn merge_code(e: &MergeError) -> i32 {
    use MergeError::*;
    match e {
        Pool(p) => pool_code(p),
        Tensor(_) | NegativeFisher { .. } | SingularSystem(_) => EXIT_NUMERIC,
        MissingStats { .. } | StatsShapeMismatch { .. } | GramShapeMismatch { .. } => EXIT_VALIDATION,
        EmptyPool
        | NegativeWeight { .. }
        | ZeroWeightSum
        | LengthMismatch { .. }
        | InvalidTrimFraction(_)
        | InvalidRegularizer(_)
        | InvalidEpsilon(_)
        | InvalidSparsity(_)
        | NonFiniteParameter { .. }
        | UnknownAlgorithm(_)
        | UnexpectedParameter { .. }
        | MissingParameter { .. }
        | RequiresSingleModel { .. } => EXIT_CONFIG,
    }
}

fn eval_code(e: &EvalError) -> i32 {
    use EvalError::*;
    match e {
        Checkpoint(c) => checkpoint_code(c),
        Tensor(_) => EXIT_NUMERIC,
        ShapeMismatch(_) | LengthMismatch { .. } | MalformedArchitecture(_) | InvalidDataset(_) => EXIT_VALIDATION,
        EmptyEnsemble | NegativeWeight { .. } | ZeroWeightSum | NoTasks | UnknownMethod(_) => EXIT_CONFIG,
    }
}

impl Error {
    /// Process exit status: 2 config, 3 validation, 4 numeric, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(ConfigError::Io { .. }) => EXIT_IO,
            Error::Config(_) => EXIT_CONFIG,
            Error::Checkpoint(c) => checkpoint_code(c),
            Error::Pool(p) => pool_code(p),
            Error::Merge(m) => merge_code(m),
            Error::Eval(e) | Error::EvalAfterMerge { source: e, .. } => eval_code(e),
            Error::Tensor(_) => EXIT_NUMERIC,
            Error::Io { .. } => EXIT_IO,
        }
    }
}
