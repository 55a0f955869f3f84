//! The model pool: a validated collection of homogeneous checkpoints with an
//! optional pretrained base, per-model statistics, and a key filter that
//! separates merged parameters from carried-through ones (task heads).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{open_lazy, CheckpointError, CheckpointRef};
use crate::tensor::{self, DType, TensorError, TensorMap};

#[derive(Error, Debug)]
pub enum PoolError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("the pool has no base model")]
    NoBaseModel,
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("duplicate model name `{0}`")]
    DuplicateModel(String),
    #[error("model names must be non-empty")]
    EmptyModelName,
    #[error("the pool has no models")]
    EmptyPool,
    #[error("invalid key pattern `{0}`")]
    InvalidPattern(String),
    #[error("pool is not mergeable:\n{0}")]
    NotMergeable(ValidationReport),
    #[error("task vector of `{0}` has zero norm")]
    ZeroNorm(String),
}

/// Where a model's tensors come from.
#[derive(Debug, Clone)]
pub enum ModelSource {
    File(CheckpointRef),
    Memory(Arc<TensorMap>),
}

impl ModelSource {
    pub fn file(path: impl Into<std::path::PathBuf>) -> Self {
        ModelSource::File(CheckpointRef::new(path))
    }

    pub fn memory(map: TensorMap) -> Self {
        ModelSource::Memory(Arc::new(map))
    }

    /// Per-key dtype and shape, without loading payloads.
    pub fn describe(&self) -> Result<BTreeMap<String, (DType, Vec<usize>)>, CheckpointError> {
        Ok(match self {
            ModelSource::File(r) => open_lazy(r)?
                .index()
                .iter()
                .map(|(k, i)| (k.clone(), (i.dtype, i.shape.clone())))
                .collect(),
            ModelSource::Memory(m) => m
                .iter()
                .map(|(k, t)| (k.clone(), (t.dtype(), t.shape().to_vec())))
                .collect(),
        })
    }

    pub fn load_all(&self) -> Result<TensorMap, CheckpointError> {
        match self {
            ModelSource::File(r) => open_lazy(r)?.load_all(),
            ModelSource::Memory(m) => Ok((**m).clone()),
        }
    }

    /// Loads only `keys`; missing keys are an error.
    pub fn load_keys(&self, keys: &[String]) -> Result<TensorMap, CheckpointError> {
        match self {
            ModelSource::File(r) => {
                let cp = open_lazy(r)?;
                keys.iter()
                    .map(|k| Ok((k.clone(), cp.load_tensor(k)?)))
                    .collect()
            }
            ModelSource::Memory(m) => keys
                .iter()
                .map(|k| {
                    m.get(k)
                        .map(|t| (k.clone(), t.clone()))
                        .ok_or_else(|| CheckpointError::UnknownKey(k.clone()))
                })
                .collect(),
        }
    }
}

/// Include/exclude glob patterns over parameter keys. `*` matches any run of
/// characters; everything else is literal.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyFilter {
    pub include: Vec<String>,
    pub exclude: Vec<String>,
}

impl KeyFilter {
    pub fn is_empty(&self) -> bool {
        self.include.is_empty() && self.exclude.is_empty()
    }

    pub fn exclude(patterns: impl IntoIterator<Item = impl Into<String>>) -> Self {
        KeyFilter {
            include: Vec::new(),
            exclude: patterns.into_iter().map(Into::into).collect(),
        }
    }
}

pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p = pattern.as_bytes();
    let t = text.as_bytes();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}

/// Keeps keys matching any include pattern (all keys when there are none),
/// then drops keys matching any exclude pattern. Input order is preserved.
pub fn apply_key_filter<S: AsRef<str>>(keys: &[S], filter: &KeyFilter) -> Result<Vec<String>, PoolError> {
    if let Some(bad) = filter.include.iter().chain(&filter.exclude).find(|p| p.is_empty()) {
        return Err(PoolError::InvalidPattern(bad.clone()));
    }
    Ok(keys
        .iter()
        .map(AsRef::as_ref)
        .filter(|k| filter.include.is_empty() || filter.include.iter().any(|p| glob_match(p, k)))
        .filter(|k| !filter.exclude.iter().any(|p| glob_match(p, k)))
        .map(str::to_string)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Conflict<T> {
    pub key: String,
    pub expected: T,
    pub found: T,
}

/// Structural differences of one model relative to the reference.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ModelDiscrepancies {
    pub name: String,
    pub missing: Vec<String>,
    pub extra: Vec<String>,
    pub shape_conflicts: Vec<Conflict<Vec<usize>>>,
    pub dtype_conflicts: Vec<Conflict<String>>,
}

impl ModelDiscrepancies {
    pub fn is_clean(&self) -> bool {
        self.missing.is_empty()
            && self.extra.is_empty()
            && self.shape_conflicts.is_empty()
            && self.dtype_conflicts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    /// `"base"` or the name of the first model.
    pub reference: String,
    pub models: Vec<ModelDiscrepancies>,
}

impl ValidationReport {
    pub fn is_mergeable(&self) -> bool {
        self.models.iter().all(ModelDiscrepancies::is_clean)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "reference: {}", self.reference)?;
        for m in &self.models {
            if m.is_clean() {
                writeln!(f, "  {}: ok", m.name)?;
                continue;
            }
            writeln!(f, "  {}:", m.name)?;
            for k in &m.missing {
                writeln!(f, "    missing key `{k}`")?;
            }
            for k in &m.extra {
                writeln!(f, "    extra key `{k}`")?;
            }
            for c in &m.shape_conflicts {
                writeln!(f, "    shape of `{}`: expected {:?}, found {:?}", c.key, c.expected, c.found)?;
            }
            for c in &m.dtype_conflicts {
                writeln!(f, "    dtype of `{}`: expected {}, found {}", c.key, c.expected, c.found)?;
            }
        }
        Ok(())
    }
}

/// `τ = θ_model − θ_base` over the filtered keys.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub name: String,
    pub delta: TensorMap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CosineMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl fmt::Display for CosineMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.names.iter().map(String::len).max().unwrap_or(0).max(6);
        write!(f, "{:width$}", "")?;
        for n in &self.names {
            write!(f, " {n:>width$}")?;
        }
        writeln!(f)?;
        for (n, row) in self.names.iter().zip(&self.values) {
            write!(f, "{n:width$}")?;
            for v in row {
                write!(f, " {v:>width$.2}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Name used for the base model wherever a model name is expected.
pub const BASE_NAME: &str = "base";

#[derive(Debug, Clone, Default)]
pub struct ModelPool {
    base: Option<ModelSource>,
    models: Vec<(String, ModelSource)>,
    stats: BTreeMap<String, ModelSource>,
    key_filter: KeyFilter,
    carrier: Option<String>,
}

impl ModelPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Pool of in-memory models named `model_0`, `model_1`, ...
    pub fn from_maps(base: Option<TensorMap>, models: impl IntoIterator<Item = TensorMap>) -> Self {
        let mut pool = ModelPool::new();
        pool.base = base.map(ModelSource::memory);
        pool.models = models
            .into_iter()
            .enumerate()
            .map(|(i, m)| (format!("model_{i}"), ModelSource::memory(m)))
            .collect();
        pool
    }

    pub fn with_base(mut self, base: ModelSource) -> Self {
        self.base = Some(base);
        self
    }

    pub fn with_model(mut self, name: impl Into<String>, source: ModelSource) -> Result<Self, PoolError> {
        self.add_model(name, source)?;
        Ok(self)
    }

    pub fn add_model(&mut self, name: impl Into<String>, source: ModelSource) -> Result<(), PoolError> {
        let name = name.into();
        if name.is_empty() {
            return Err(PoolError::EmptyModelName);
        }
        if self.models.iter().any(|(n, _)| *n == name) {
            return Err(PoolError::DuplicateModel(name));
        }
        self.models.push((name, source));
        Ok(())
    }

    pub fn with_stats(mut self, name: impl Into<String>, source: ModelSource) -> Self {
        self.stats.insert(name.into(), source);
        self
    }

    pub fn with_key_filter(mut self, filter: KeyFilter) -> Self {
        self.key_filter = filter;
        self
    }

    /// Model whose filtered-out keys are copied into merge outputs.
    pub fn with_carrier(mut self, name: impl Into<String>) -> Self {
        self.carrier = Some(name.into());
        self
    }

    pub fn base(&self) -> Option<&ModelSource> {
        self.base.as_ref()
    }

    pub fn has_base(&self) -> bool {
        self.base.is_some()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn model_names(&self) -> Vec<&str> {
        self.models.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn key_filter(&self) -> &KeyFilter {
        &self.key_filter
    }

    fn source(&self, name: &str) -> Result<&ModelSource, PoolError> {
        if let Some((_, s)) = self.models.iter().find(|(n, _)| n == name) {
            return Ok(s);
        }
        match (&self.base, name) {
            (Some(b), BASE_NAME) => Ok(b),
            _ => Err(PoolError::UnknownModel(name.to_string())),
        }
    }

    fn reference(&self) -> Result<(&str, &ModelSource), PoolError> {
        match (&self.base, self.models.first()) {
            (Some(b), _) => Ok((BASE_NAME, b)),
            (None, Some((n, s))) => Ok((n.as_str(), s)),
            (None, None) => Err(PoolError::EmptyPool),
        }
    }

    fn filtered_description(
        &self,
        source: &ModelSource,
    ) -> Result<BTreeMap<String, (DType, Vec<usize>)>, PoolError> {
        let mut desc = source.describe()?;
        let keys: Vec<&String> = desc.keys().collect();
        let keep: BTreeSet<String> = apply_key_filter(&keys, &self.key_filter)?.into_iter().collect();
        desc.retain(|k, _| keep.contains(k));
        Ok(desc)
    }

    /// Compares every model against the base (or the first model when there
    /// is no base) over the filtered key set.
    pub fn validate(&self) -> Result<ValidationReport, PoolError> {
        let (ref_name, ref_source) = self.reference()?;
        let reference = self.filtered_description(ref_source)?;
        let mut models = Vec::with_capacity(self.models.len());
        for (name, source) in &self.models {
            let desc = self.filtered_description(source)?;
            let mut d = ModelDiscrepancies {
                name: name.clone(),
                ..Default::default()
            };
            for (k, (dtype, shape)) in &reference {
                match desc.get(k) {
                    None => d.missing.push(k.clone()),
                    Some((fd, fs)) => {
                        if fs != shape {
                            d.shape_conflicts.push(Conflict {
                                key: k.clone(),
                                expected: shape.clone(),
                                found: fs.clone(),
                            });
                        }
                        if fd != dtype {
                            d.dtype_conflicts.push(Conflict {
                                key: k.clone(),
                                expected: dtype.to_string(),
                                found: fd.to_string(),
                            });
                        }
                    }
                }
            }
            d.extra = desc.keys().filter(|k| !reference.contains_key(*k)).cloned().collect();
            models.push(d);
        }
        Ok(ValidationReport {
            reference: ref_name.to_string(),
            models,
        })
    }

    /// Validates and fails with [`PoolError::NotMergeable`] on any discrepancy.
    pub fn ensure_mergeable(&self) -> Result<(), PoolError> {
        if self.models.is_empty() {
            return Err(PoolError::EmptyPool);
        }
        let report = self.validate()?;
        if report.is_mergeable() {
            Ok(())
        } else {
            Err(PoolError::NotMergeable(report))
        }
    }

    /// Filtered keys of the reference model, in lexicographic order.
    pub fn merge_keys(&self) -> Result<Vec<String>, PoolError> {
        let (_, source) = self.reference()?;
        Ok(self.filtered_description(source)?.into_keys().collect())
    }

    /// Loads a model (or `"base"`) restricted to the merge keys.
    pub fn load_model(&self, name: &str) -> Result<TensorMap, PoolError> {
        let keys = self.merge_keys()?;
        Ok(self.source(name)?.load_keys(&keys)?)
    }

    pub fn load_models(&self) -> Result<Vec<TensorMap>, PoolError> {
        let keys = self.merge_keys()?;
        self.models
            .iter()
            .map(|(_, s)| Ok(s.load_keys(&keys)?))
            .collect()
    }

    pub fn load_base(&self) -> Result<TensorMap, PoolError> {
        let base = self.base.as_ref().ok_or(PoolError::NoBaseModel)?;
        Ok(base.load_keys(&self.merge_keys()?)?)
    }

    /// Full statistics map for `name`, if one was registered.
    pub fn load_stats(&self, name: &str) -> Result<Option<TensorMap>, PoolError> {
        match self.stats.get(name) {
            Some(s) => Ok(Some(s.load_all()?)),
            None => Ok(None),
        }
    }

    pub fn carrier_name(&self) -> Result<&str, PoolError> {
        if let Some(c) = &self.carrier {
            self.source(c)?;
            return Ok(c);
        }
        Ok(self.reference()?.0)
    }

    /// Keys of the carrier model that the key filter removed, copied verbatim.
    pub fn carrier_passthrough(&self) -> Result<TensorMap, PoolError> {
        if self.key_filter.is_empty() {
            return Ok(TensorMap::new());
        }
        let source = self.source(self.carrier_name()?)?;
        let all: Vec<String> = source.describe()?.into_keys().collect();
        let kept: BTreeSet<String> = apply_key_filter(&all, &self.key_filter)?.into_iter().collect();
        let carried: Vec<String> = all.into_iter().filter(|k| !kept.contains(k)).collect();
        Ok(source.load_keys(&carried)?)
    }

    /// Adds the carrier's filtered-out keys to a merged map.
    pub fn finish(&self, mut merged: TensorMap) -> Result<TensorMap, PoolError> {
        for (k, t) in self.carrier_passthrough()? {
            merged.insert(k, t);
        }
        Ok(merged)
    }

    pub fn task_vector(&self, name: &str) -> Result<TaskVector, PoolError> {
        if self.base.is_none() {
            return Err(PoolError::NoBaseModel);
        }
        if !self.models.iter().any(|(n, _)| n == name) {
            return Err(PoolError::UnknownModel(name.to_string()));
        }
        self.ensure_mergeable()?;
        let base = self.load_base()?;
        let model = self.load_model(name)?;
        Ok(TaskVector {
            name: name.to_string(),
            delta: tensor::map_sub(&model, &base)?,
        })
    }

    /// Task vectors of every model, in pool order, computed in `f64`.
    pub fn task_vectors(&self) -> Result<Vec<TaskVector>, PoolError> {
        self.ensure_mergeable()?;
        let base = self.load_base()?;
        self.models
            .iter()
            .map(|(name, s)| {
                let model = s.load_keys(&self.merge_keys()?)?;
                let delta = model
                    .iter()
                    .map(|(k, t)| {
                        let b = base.get(k).expect("validated").to_f64_vec();
                        let v: Vec<f64> = t.to_f64_vec().iter().zip(&b).map(|(x, y)| x - y).collect();
                        Ok((k.clone(), tensor::Tensor::from_f64(DType::F64, t.shape().to_vec(), &v)?))
                    })
                    .collect::<Result<TensorMap, TensorError>>()?;
                Ok(TaskVector {
                    name: name.clone(),
                    delta,
                })
            })
            .collect()
    }

    /// Pairwise cosine similarity of task vectors.
    pub fn task_vector_cosine_matrix(&self) -> Result<CosineMatrix, PoolError> {
        if self.base.is_none() {
            return Err(PoolError::NoBaseModel);
        }
        let tvs = self.task_vectors()?;
        for tv in &tvs {
            if tensor::flat_norm(&tv.delta) == 0.0 {
                return Err(PoolError::ZeroNorm(tv.name.clone()));
            }
        }
        let n = tvs.len();
        let mut values = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let c = tensor::cosine_similarity(&tvs[i].delta, &tvs[j].delta)?;
                values[i][j] = c;
                values[j][i] = c;
            }
        }
        Ok(CosineMatrix {
            names: tvs.into_iter().map(|t| t.name).collect(),
            values,
        })
    }
}
