//! The task pool: labeled datasets, a small MLP inference engine, accuracy,
//! and evaluation reports.
//!
//! MLP checkpoints use the keys `layers.{i}.weight` (`[out, in]`) and
//! `layers.{i}.bias` (`[out]`) for consecutive `i` from 0. Every layer but
//! the last is followed by a ReLU.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::checkpoint::{load_map, save_map, CheckpointError};
use crate::ensemble::PredictionMatrix;
use crate::linalg::Matrix;
use crate::tensor::{Tensor, TensorError, TensorMap};

#[derive(Error, Debug)]
pub enum EvalError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error("weight {index} is negative or not finite ({value})")]
    NegativeWeight { index: usize, value: f64 },
    #[error("weights sum to zero")]
    ZeroWeightSum,
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("malformed architecture: {0}")]
    MalformedArchitecture(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("no evaluation tasks given")]
    NoTasks,
    #[error("unknown ensemble method `{0}`")]
    UnknownMethod(String),
}

/// Features `[n_samples × n_features]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub labels: Vec<i64>,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<i64>) -> Result<Self, EvalError> {
        if features.rows() != labels.len() {
            return Err(EvalError::InvalidDataset(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l < 0) {
            return Err(EvalError::InvalidDataset(format!("negative label {l}")));
        }
        Ok(LabeledDataset { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Reads a container holding `features` (2-D) and `labels` (1-D I64).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Self::from_map(&load_map(path)?)
    }

    pub fn from_map(m: &TensorMap) -> Result<Self, EvalError> {
        let features = m
            .get("features")
            .ok_or_else(|| EvalError::InvalidDataset("missing `features`".into()))?;
        let labels = m
            .get("labels")
            .ok_or_else(|| EvalError::InvalidDataset("missing `labels`".into()))?;
        if labels.rank() != 1 {
            return Err(EvalError::InvalidDataset(format!("labels have shape {:?}", labels.shape())));
        }
        let features = features
            .to_matrix()
            .map_err(|_| EvalError::InvalidDataset(format!("features have shape {:?}", features.shape())))?;
        Self::new(features, labels.to_i64_vec())
    }

    pub fn to_map(&self) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert(
            "features",
            Tensor::from_f64(
                crate::tensor::DType::F32,
                vec![self.features.rows(), self.features.cols()],
                self.features.as_slice(),
            )
            .expect("matrix shape"),
        );
        m.insert(
            "labels",
            Tensor::from_i64(vec![self.labels.len()], &self.labels).expect("label count"),
        );
        m
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        save_map(&self.to_map(), path)?;
        Ok(())
    }
}

struct DenseLayer {
    weight: Matrix,
    bias: Vec<f64>,
}

fn parse_layers(model: &TensorMap) -> Result<Vec<DenseLayer>, EvalError> {
    let malformed = |m: String| EvalError::MalformedArchitecture(m);
    let mut found: BTreeMap<usize, (Option<&Tensor>, Option<&Tensor>)> = BTreeMap::new();
    for (key, t) in model.iter() {
        let Some(rest) = key.strip_prefix("layers.") else {
            continue;
        };
        let parsed = rest
            .split_once('.')
            .and_then(|(i, kind)| i.parse::<usize>().ok().map(|i| (i, kind)));
        match parsed {
            Some((i, "weight")) => found.entry(i).or_default().0 = Some(t),
            Some((i, "bias")) => found.entry(i).or_default().1 = Some(t),
            _ => return Err(malformed(format!("unexpected key `{key}`"))),
        }
    }
    if found.is_empty() {
        return Err(malformed("no `layers.{i}` parameters".into()));
    }
    let mut layers = Vec::with_capacity(found.len());
    for (expected, (i, (w, b))) in found.into_iter().enumerate() {
        if i != expected {
            return Err(malformed(format!("layer indices skip from {} to {i}", expected as i64 - 1)));
        }
        let w = w.ok_or_else(|| malformed(format!("layer {i} has no weight")))?;
        let b = b.ok_or_else(|| malformed(format!("layer {i} has no bias")))?;
        let weight = w
            .to_matrix()
            .map_err(|_| malformed(format!("layer {i} weight has shape {:?}", w.shape())))?;
        if b.shape() != [weight.rows()] {
            return Err(malformed(format!(
                "layer {i} bias has shape {:?}, expected [{}]",
                b.shape(),
                weight.rows()
            )));
        }
        if let Some(prev) = layers.last().map(|l: &DenseLayer| l.weight.rows()) {
            if weight.cols() != prev {
                return Err(malformed(format!(
                    "layer {i} expects {} inputs but layer {} produces {prev}",
                    weight.cols(),
                    i - 1
                )));
            }
        }
        layers.push(DenseLayer {
            weight,
            bias: b.to_f64_vec(),
        });
    }
    Ok(layers)
}

/// Runs the MLP on every feature row and returns the final-layer logits.
pub fn mlp_forward(model: &TensorMap, features: &Matrix) -> Result<PredictionMatrix, EvalError> {
    let layers = parse_layers(model)?;
    let in_width = layers[0].weight.cols();
    if features.cols() != in_width {
        return Err(EvalError::MalformedArchitecture(format!(
            "features have width {} but layer 0 expects {in_width}",
            features.cols()
        )));
    }
    let last = layers.len() - 1;
    let mut x = features.clone();
    for (li, layer) in layers.iter().enumerate() {
        let mut y = x.matmul(&layer.weight.transpose());
        for r in 0..y.rows() {
            for c in 0..y.cols() {
                let v = y[(r, c)] + layer.bias[c];
                y[(r, c)] = if li < last { v.max(0.0) } else { v };
            }
        }
        x = y;
    }
    PredictionMatrix::new("logits", x.rows(), x.cols(), x.as_slice().to_vec())
}

/// Fraction of rows whose argmax (ties to the lowest class) equals the label.
pub fn accuracy(preds: &PredictionMatrix, labels: &[i64]) -> Result<f64, EvalError> {
    if preds.n_samples() != labels.len() {
        return Err(EvalError::LengthMismatch {
            expected: preds.n_samples(),
            found: labels.len(),
        });
    }
    let correct = preds
        .argmax()
        .into_iter()
        .zip(labels)
        .filter(|(p, l)| *p as i64 == **l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Per-task accuracies plus their unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: BTreeMap<String, f64>,
    pub average: f64,
    #[serde(default)]
    pub algorithm: Option<String>,
    #[serde(default)]
    pub spec: Value,
    pub version: String,
    /// Seconds since the Unix epoch; excluded from report comparisons.
    #[serde(default)]
    pub timestamp: u64,
}

impl EvalReport {
    pub fn from_tasks(tasks: BTreeMap<String, f64>) -> Result<Self, EvalError> {
        if tasks.is_empty() {
            return Err(EvalError::NoTasks);
        }
        let average = tasks.values().sum::<f64>() / tasks.len() as f64;
        Ok(EvalReport {
            tasks,
            average,
            algorithm: None,
            spec: Value::Object(Default::default()),
            version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        })
    }

    /// Pretty JSON with lexicographically ordered keys.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        serde_json::to_string_pretty(&value).expect("report serializes") + "\n"
    }

    /// Equality ignoring the timestamp.
    pub fn same_results(&self, other: &EvalReport) -> bool {
        EvalReport {
            timestamp: 0,
            ..self.clone()
        } == EvalReport {
            timestamp: 0,
            ..other.clone()
        }
    }
}

/// Evaluates `model` on every task and averages the accuracies.
pub fn evaluate(model: &TensorMap, tasks: &[(String, LabeledDataset)]) -> Result<EvalReport, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::NoTasks);
    }
    let mut results = BTreeMap::new();
    for (name, data) in tasks {
        let logits = mlp_forward(model, &data.features)?;
        if let Some(l) = data.labels.iter().find(|l| **l as usize >= logits.n_classes()) {
            return Err(EvalError::InvalidDataset(format!(
                "task `{name}` has label {l} but the model predicts {} classes",
                logits.n_classes()
            )));
        }
        let acc = accuracy(&logits, &data.labels)?;
        log::info!("task {name}: accuracy {acc:.4}");
        results.insert(name.clone(), acc);
    }
    EvalReport::from_tasks(results)
}
