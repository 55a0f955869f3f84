//! Parameter-space fusion algorithms.
//!
//! Every algorithm consumes a [`ModelPool`] and produces a merged
//! [`TensorMap`]. Merging happens over the pool's filtered key set; keys the
//! filter removed are copied from the pool's carrier model so outputs stay
//! loadable.
//!
//! [`run`] dispatches a [`MergeSpec`] (algorithm name plus hyperparameters)
//! to the matching function and records a [`MergeReport`]. Custom algorithms
//! implement [`FusionAlgorithm`] and plug into the same pipeline.

mod average;
mod prune;
mod task_vector;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::pool::{ModelPool, PoolError};
use crate::tensor::{TensorError, TensorMap};

pub use average::{fisher_merging, regmean, regmean_detailed, simple_average, weighted_average, RegMeanOutput};
pub use prune::magnitude_prune;
pub use task_vector::{isotropic_merge, tall_mask, task_arithmetic, ties_merging, ties_merge_flat};

pub const DEFAULT_SCALING: f64 = 0.3;
pub const DEFAULT_TALL_SCALING: f64 = 0.4;
pub const DEFAULT_TRIM_FRACTION: f64 = 0.2;
pub const DEFAULT_FISHER_EPSILON: f64 = 1e-8;
pub const DEFAULT_GRAM_REGULARIZER: f64 = 0.9;

#[derive(Error, Debug)]
pub enum MergeError {
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("the pool has no models")]
    EmptyPool,
    #[error("weight {index} is negative ({value})")]
    NegativeWeight { index: usize, value: f64 },
    #[error("weights sum to zero")]
    ZeroWeightSum,
    #[error("expected {expected} weights, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("trim fraction {0} is outside (0, 1]")]
    InvalidTrimFraction(f64),
    #[error("gram regularizer {0} is outside [0, 1]")]
    InvalidRegularizer(f64),
    #[error("fisher epsilon {0} must be finite and non-negative")]
    InvalidEpsilon(f64),
    #[error("sparsity {0} is outside [0, 1)")]
    InvalidSparsity(f64),
    #[error("parameter `{name}` is not finite ({value})")]
    NonFiniteParameter { name: &'static str, value: f64 },
    #[error("missing statistics for model `{model}`{}", key.as_ref().map(|k| format!(" (key `{k}`)")).unwrap_or_default())]
    MissingStats { model: String, key: Option<String> },
    #[error("statistics for `{key}` of model `{model}` have shape {found:?}, expected {expected:?}")]
    StatsShapeMismatch {
        model: String,
        key: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("negative or non-finite Fisher entry in `{key}` of model `{model}`")]
    NegativeFisher { model: String, key: String },
    #[error("Gram matrix for `{key}` of model `{model}` has shape {found:?}, expected {expected:?}")]
    GramShapeMismatch {
        model: String,
        key: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("regularized Gram system for `{0}` is singular")]
    SingularSystem(String),
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),
    #[error("parameter `{parameter}` is not used by {algorithm}")]
    UnexpectedParameter { algorithm: Algorithm, parameter: &'static str },
    #[error("{algorithm} requires parameter `{parameter}`")]
    MissingParameter { algorithm: Algorithm, parameter: &'static str },
    #[error("{algorithm} operates on exactly one model, the pool has {found}")]
    RequiresSingleModel { algorithm: Algorithm, found: usize },
}

/// Identifier of a built-in merging algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    SimpleAverage,
    WeightedAverage,
    TaskArithmetic,
    TiesMerging,
    FisherMerging,
    RegMean,
    TallMask,
    IsotropicMerging,
    MagnitudePruning,
}

impl Algorithm {
    pub const ALL: [Algorithm; 9] = [
        Algorithm::SimpleAverage,
        Algorithm::WeightedAverage,
        Algorithm::TaskArithmetic,
        Algorithm::TiesMerging,
        Algorithm::FisherMerging,
        Algorithm::RegMean,
        Algorithm::TallMask,
        Algorithm::IsotropicMerging,
        Algorithm::MagnitudePruning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::SimpleAverage => "simple_average",
            Algorithm::WeightedAverage => "weighted_average",
            Algorithm::TaskArithmetic => "task_arithmetic",
            Algorithm::TiesMerging => "ties_merging",
            Algorithm::FisherMerging => "fisher_merging",
            Algorithm::RegMean => "regmean",
            Algorithm::TallMask => "tall_mask",
            Algorithm::IsotropicMerging => "isotropic_merging",
            Algorithm::MagnitudePruning => "magnitude_pruning",
        }
    }

    /// Names of the [`MergeSpec`] fields this algorithm consults.
    pub fn parameters(self) -> &'static [&'static str] {
        match self {
            Algorithm::SimpleAverage | Algorithm::IsotropicMerging => &[],
            Algorithm::WeightedAverage => &["weights"],
            Algorithm::TaskArithmetic | Algorithm::TallMask => &["scaling"],
            Algorithm::TiesMerging => &["scaling", "trim_fraction"],
            Algorithm::FisherMerging => &["epsilon"],
            Algorithm::RegMean => &["gram_regularizer"],
            Algorithm::MagnitudePruning => &["sparsity"],
        }
    }

    pub fn needs_base(self) -> bool {
        matches!(
            self,
            Algorithm::TaskArithmetic
                | Algorithm::TiesMerging
                | Algorithm::TallMask
                | Algorithm::IsotropicMerging
        )
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = MergeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| MergeError::UnknownAlgorithm(s.to_string()))
    }
}

/// Algorithm identifier plus its hyperparameters. Unset fields take the
/// algorithm's default; set fields the algorithm does not use are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSpec {
    pub algorithm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trim_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gram_regularizer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
}

impl MergeSpec {
    pub fn new(algorithm: Algorithm) -> Self {
        MergeSpec {
            algorithm: algorithm.as_str().to_string(),
            ..Default::default()
        }
    }

    pub fn scaling(mut self, v: f64) -> Self {
        self.scaling = Some(v);
        self
    }

    pub fn weights(mut self, w: Vec<f64>) -> Self {
        self.weights = Some(w);
        self
    }

    pub fn trim_fraction(mut self, k: f64) -> Self {
        self.trim_fraction = Some(k);
        self
    }

    pub fn epsilon(mut self, e: f64) -> Self {
        self.epsilon = Some(e);
        self
    }

    pub fn gram_regularizer(mut self, a: f64) -> Self {
        self.gram_regularizer = Some(a);
        self
    }

    pub fn sparsity(mut self, s: f64) -> Self {
        self.sparsity = Some(s);
        self
    }

    fn set_fields(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.scaling.is_some() {
            out.push("scaling");
        }
        if self.weights.is_some() {
            out.push("weights");
        }
        if self.trim_fraction.is_some() {
            out.push("trim_fraction");
        }
        if self.epsilon.is_some() {
            out.push("epsilon");
        }
        if self.gram_regularizer.is_some() {
            out.push("gram_regularizer");
        }
        if self.sparsity.is_some() {
            out.push("sparsity");
        }
        out
    }

    /// Resolves the algorithm and checks that only its parameters are set.
    pub fn resolve(&self) -> Result<Algorithm, MergeError> {
        let algorithm: Algorithm = self.algorithm.parse()?;
        let allowed = algorithm.parameters();
        if let Some(p) = self.set_fields().into_iter().find(|p| !allowed.contains(p)) {
            return Err(MergeError::UnexpectedParameter { algorithm, parameter: p });
        }
        let scalars = [
            ("scaling", self.scaling),
            ("trim_fraction", self.trim_fraction),
            ("epsilon", self.epsilon),
            ("gram_regularizer", self.gram_regularizer),
            ("sparsity", self.sparsity),
        ];
        for (name, v) in scalars {
            if let Some(v) = v.filter(|v| !v.is_finite()) {
                return Err(MergeError::NonFiniteParameter { name, value: v });
            }
        }
        if let Some(v) = self.weights.iter().flatten().find(|v| !v.is_finite()) {
            return Err(MergeError::NonFiniteParameter { name: "weights", value: *v });
        }
        Ok(algorithm)
    }
}

/// Per-model binary masks mirroring the merged key set.
pub type MaskSet = BTreeMap<String, TensorMap>;

/// What a merge run did, for logs and reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeReport {
    pub algorithm: String,
    /// Effective hyperparameters, defaults included.
    pub parameters: Value,
    pub models: Vec<String>,
    pub carried_keys: Vec<String>,
    /// Keys merged by a fallback rule (RegMean keys without Gram matrices).
    pub fallback_keys: Vec<String>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub merged: TensorMap,
    pub masks: Option<MaskSet>,
    pub report: MergeReport,
}

/// A fusion algorithm: consumes a pool, returns the fused model.
pub trait FusionAlgorithm {
    fn name(&self) -> &str;

    fn run(&self, pool: &ModelPool) -> Result<MergeOutcome, MergeError>;
}

impl FusionAlgorithm for MergeSpec {
    fn name(&self) -> &str {
        &self.algorithm
    }

    fn run(&self, pool: &ModelPool) -> Result<MergeOutcome, MergeError> {
        run(pool, self)
    }
}

/// Dispatches `spec` to its algorithm.
pub fn run(pool: &ModelPool, spec: &MergeSpec) -> Result<MergeOutcome, MergeError> {
    let algorithm = spec.resolve()?;
    let start = Instant::now();
    let mut masks = None;
    let mut fallback_keys = Vec::new();
    let (merged, parameters) = match algorithm {
        Algorithm::SimpleAverage => (simple_average(pool)?, json!({})),
        Algorithm::WeightedAverage => {
            let weights = spec.weights.clone().ok_or(MergeError::MissingParameter {
                algorithm,
                parameter: "weights",
            })?;
            (weighted_average(pool, &weights)?, json!({ "weights": weights }))
        }
        Algorithm::TaskArithmetic => {
            let l = spec.scaling.unwrap_or(DEFAULT_SCALING);
            (task_arithmetic(pool, l)?, json!({ "scaling": l }))
        }
        Algorithm::TiesMerging => {
            let l = spec.scaling.unwrap_or(DEFAULT_SCALING);
            let k = spec.trim_fraction.unwrap_or(DEFAULT_TRIM_FRACTION);
            (ties_merging(pool, l, k)?, json!({ "scaling": l, "trim_fraction": k }))
        }
        Algorithm::FisherMerging => {
            let e = spec.epsilon.unwrap_or(DEFAULT_FISHER_EPSILON);
            (fisher_merging(pool, e)?, json!({ "epsilon": e }))
        }
        Algorithm::RegMean => {
            let a = spec.gram_regularizer.unwrap_or(DEFAULT_GRAM_REGULARIZER);
            let out = regmean_detailed(pool, a)?;
            fallback_keys = out.fallback_keys;
            (out.merged, json!({ "gram_regularizer": a }))
        }
        Algorithm::TallMask => {
            let l = spec.scaling.unwrap_or(DEFAULT_TALL_SCALING);
            let (merged, m) = tall_mask(pool, l)?;
            masks = Some(m);
            (merged, json!({ "scaling": l }))
        }
        Algorithm::IsotropicMerging => (isotropic_merge(pool)?, json!({})),
        Algorithm::MagnitudePruning => {
            let s = spec.sparsity.ok_or(MergeError::MissingParameter {
                algorithm,
                parameter: "sparsity",
            })?;
            if pool.len() != 1 {
                return Err(MergeError::RequiresSingleModel {
                    algorithm,
                    found: pool.len(),
                });
            }
            pool.ensure_mergeable()?;
            let name = pool.model_names()[0].to_string();
            let pruned = magnitude_prune(&pool.load_model(&name)?, s)?;
            (pool.finish(pruned)?, json!({ "sparsity": s }))
        }
    };
    let carried_keys = pool.carrier_passthrough()?.keys().map(str::to_string).collect();
    let report = MergeReport {
        algorithm: algorithm.as_str().to_string(),
        parameters,
        models: pool.model_names().iter().map(|s| s.to_string()).collect(),
        carried_keys,
        fallback_keys,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    log::info!(
        "{} merged {} models in {:.1} ms",
        report.algorithm,
        report.models.len(),
        report.elapsed_ms
    );
    Ok(MergeOutcome { merged, masks, report })
}

/// Key name, shape and flat element range of each tensor in `template`.
pub(crate) fn key_ranges(template: &TensorMap) -> Vec<(String, Vec<usize>, Range<usize>)> {
    let mut offset = 0;
    template
        .iter()
        .map(|(k, t)| {
            let r = offset..offset + t.numel();
            offset = r.end;
            (k.clone(), t.shape().to_vec(), r)
        })
        .collect()
}

pub(crate) fn require_models(pool: &ModelPool) -> Result<(), MergeError> {
    if pool.is_empty() {
        return Err(MergeError::EmptyPool);
    }
    pool.ensure_mergeable()?;
    Ok(())
}
