//! Model merging and ensembling over safetensors checkpoints.
//!
//! A [`ModelPool`] names the checkpoints to combine, a [`MergeSpec`] picks the
//! algorithm, and [`pipeline::run`] ties them to evaluation on a task pool.
//! See the `examples/` directory for one runnable program per capability.

pub mod checkpoint;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod eval;
mod io_util;
pub mod linalg;
pub mod merge;
pub mod pipeline;
pub mod pool;
pub mod synth;
pub mod tensor;

pub use checkpoint::{load_map, open_lazy, save_map, CheckpointError, CheckpointRef, LazyCheckpoint};
pub use config::{ConfigError, RunConfig};
pub use ensemble::{max_model_predictor, simple_ensemble, weighted_ensemble, PredictionMatrix};
pub use error::Error;
pub use eval::{accuracy, evaluate, mlp_forward, EvalError, EvalReport, LabeledDataset};
pub use merge::{Algorithm, FusionAlgorithm, MergeError, MergeOutcome, MergeReport, MergeSpec};
pub use pool::{KeyFilter, ModelPool, ModelSource, PoolError, ValidationReport};
pub use tensor::{DType, Tensor, TensorError, TensorMap};
