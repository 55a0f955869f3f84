//! Ensembles over stored predictions. Scores are turned into probability
//! rows with a max-subtracted softmax before they are combined.

use std::path::Path;
use std::str::FromStr;

use crate::checkpoint::{load_map, save_map};
use crate::eval::EvalError;
use crate::tensor::{DType, Tensor, TensorMap};

/// Tensor key holding the score matrix in prediction files.
pub const SCORES_KEY: &str = "scores";

/// Per-sample scores (logits or probabilities) of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    pub name: String,
    n_samples: usize,
    n_classes: usize,
    scores: Vec<f64>,
}

impl PredictionMatrix {
    pub fn new(
        name: impl Into<String>,
        n_samples: usize,
        n_classes: usize,
        scores: Vec<f64>,
    ) -> Result<Self, EvalError> {
        if n_samples == 0 || scores.len() != n_samples * n_classes {
            return Err(EvalError::ShapeMismatch(format!(
                "{} scores for {n_samples}x{n_classes} predictions",
                scores.len()
            )));
        }
        Ok(PredictionMatrix {
            name: name.into(),
            n_samples,
            n_classes,
            scores,
        })
    }

    pub fn from_rows(name: impl Into<String>, rows: &[&[f64]]) -> Result<Self, EvalError> {
        let n_classes = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n_classes) {
            return Err(EvalError::ShapeMismatch("ragged prediction rows".into()));
        }
        Self::new(name, rows.len(), n_classes, rows.concat())
    }

    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Result<Self, EvalError> {
        match *t.shape() {
            [n, c] => Self::new(name, n, c, t.to_f64_vec()),
            _ => Err(EvalError::ShapeMismatch(format!("scores must be 2-D, got {:?}", t.shape()))),
        }
    }

    pub fn to_tensor(&self, dtype: DType) -> Tensor {
        Tensor::from_f64(dtype, vec![self.n_samples, self.n_classes], &self.scores).expect("consistent shape")
    }

    /// Reads the `scores` tensor of a safetensors file; the model is named
    /// after the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let map = load_map(path)?;
        let t = map
            .get(SCORES_KEY)
            .ok_or_else(|| EvalError::ShapeMismatch(format!("{} has no `{SCORES_KEY}` tensor", path.display())))?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_tensor(name, t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let mut m = TensorMap::new();
        m.insert(SCORES_KEY, self.to_tensor(DType::F32));
        save_map(&m, path)?;
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.n_classes..(i + 1) * self.n_classes]
    }

    /// Index of the largest entry of each row, ties to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.n_samples).map(|i| argmax(self.row(i))).collect()
    }

    pub fn softmax(&self) -> PredictionMatrix {
        let mut out = Vec::with_capacity(self.scores.len());
        for i in 0..self.n_samples {
            out.extend(softmax(self.row(i)));
        }
        PredictionMatrix {
            name: self.name.clone(),
            n_samples: self.n_samples,
            n_classes: self.n_classes,
            scores: out,
        }
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMethod {
    Simple,
    Weighted,
    MaxModel,
}

impl FromStr for EnsembleMethod {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simple_ensemble" | "simple" => Ok(EnsembleMethod::Simple),
            "weighted_ensemble" | "weighted" => Ok(EnsembleMethod::Weighted),
            "max_model_predictor" | "max_model" => Ok(EnsembleMethod::MaxModel),
            other => Err(EvalError::UnknownMethod(other.to_string())),
        }
    }
}

fn check_compatible(preds: &[PredictionMatrix]) -> Result<(usize, usize), EvalError> {
    let first = preds.first().ok_or(EvalError::EmptyEnsemble)?;
    let dims = (first.n_samples, first.n_classes);
    if let Some(p) = preds.iter().find(|p| (p.n_samples, p.n_classes) != dims) {
        return Err(EvalError::ShapeMismatch(format!(
            "`{}` is {}x{}, `{}` is {}x{}",
            first.name, dims.0, dims.1, p.name, p.n_samples, p.n_classes
        )));
    }
    Ok(dims)
}

/// Mean of the models' probability rows.
pub fn simple_ensemble(preds: &[PredictionMatrix]) -> Result<PredictionMatrix, EvalError> {
    let n = preds.len() as f64;
    let (rows, cols) = check_compatible(preds)?;
    let mut acc = vec![0.0; rows * cols];
    for p in preds {
        for (a, v) in acc.iter_mut().zip(p.softmax().scores) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n);
    PredictionMatrix::new("simple_ensemble", rows, cols, acc)
}

/// Convex combination of probability rows with normalized weights.
pub fn weighted_ensemble(preds: &[PredictionMatrix], weights: &[f64]) -> Result<PredictionMatrix, EvalError> {
    let (rows, cols) = check_compatible(preds)?;
    if weights.len() != preds.len() {
        return Err(EvalError::LengthMismatch {
            expected: preds.len(),
            found: weights.len(),
        });
    }
    if let Some((index, &value)) = weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0 && w.is_finite())) {
        return Err(EvalError::NegativeWeight { index, value });
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(EvalError::ZeroWeightSum);
    }
    let mut acc = vec![0.0; rows * cols];
    for (p, w) in preds.iter().zip(weights) {
        let w = w / total;
        for (a, v) in acc.iter_mut().zip(p.softmax().scores) {
            *a += w * v;
        }
    }
    PredictionMatrix::new("weighted_ensemble", rows, cols, acc)
}

/// Per sample, the probability row of the most confident model (largest
/// maximum class probability); ties go to the lowest model index.
pub fn max_model_predictor(preds: &[PredictionMatrix]) -> Result<PredictionMatrix, EvalError> {
    let (rows, cols) = check_compatible(preds)?;
    let probs: Vec<PredictionMatrix> = preds.iter().map(PredictionMatrix::softmax).collect();
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let confidence = |p: &PredictionMatrix| p.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut best = 0;
        for (m, p) in probs.iter().enumerate().skip(1) {
            if confidence(p) > confidence(&probs[best]) {
                best = m;
            }
        }
        out.extend_from_slice(probs[best].row(i));
    }
    PredictionMatrix::new("max_model_predictor", rows, cols, out)
}

pub fn ensemble(
    method: EnsembleMethod,
    preds: &[PredictionMatrix],
    weights: Option<&[f64]>,
) -> Result<PredictionMatrix, EvalError> {
    match method {
        EnsembleMethod::Simple => simple_ensemble(preds),
        EnsembleMethod::Weighted => {
            let uniform = vec![1.0; preds.len()];
            weighted_ensemble(preds, weights.unwrap_or(&uniform))
        }
        EnsembleMethod::MaxModel => max_model_predictor(preds),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(rows: &[&[f64]]) -> PredictionMatrix {
        PredictionMatrix::from_rows("m", rows).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identical_inputs_give_softmax() {
        let p = pm(&[&[1.0, 2.0, 0.5], &[0.0, 0.0, 3.0]]);
        let out = simple_ensemble(&[p.clone(), p.clone(), p.clone()]).unwrap();
        assert!(close(out.scores(), p.softmax().scores(), 1e-12));
    }

    #[test]
    fn saturated_opposites_average_to_half() {
        let a = pm(&[&[20.0, -20.0]]);
        let b = pm(&[&[-20.0, 20.0]]);
        let out = simple_ensemble(&[a, b]).unwrap();
        assert!(close(out.scores(), &[0.5, 0.5], 1e-12));
    }

    #[test]
    fn weighted_examples() {
        let a = pm(&[&[0.0, 0.0]]);
        let b = pm(&[&[(3.0f64).ln(), 0.0]]);
        // a → [0.5, 0.5], b → [0.75, 0.25]; weights 3:1 → [0.5625, 0.4375]
        let out = weighted_ensemble(&[a.clone(), b.clone()], &[3.0, 1.0]).unwrap();
        assert!(close(out.scores(), &[0.5625, 0.4375], 1e-12));
        let first = weighted_ensemble(&[a.clone(), b.clone()], &[1.0, 0.0]).unwrap();
        assert!(close(first.scores(), a.softmax().scores(), 1e-15));
        let uni = weighted_ensemble(&[a.clone(), b.clone()], &[2.0, 2.0]).unwrap();
        assert!(close(uni.scores(), simple_ensemble(&[a.clone(), b.clone()]).unwrap().scores(), 1e-15));
        assert!(matches!(weighted_ensemble(std::slice::from_ref(&a), &[-1.0]), Err(EvalError::NegativeWeight { .. })));
        assert!(matches!(weighted_ensemble(std::slice::from_ref(&a), &[0.0]), Err(EvalError::ZeroWeightSum)));
        assert!(matches!(weighted_ensemble(&[a], &[1.0, 1.0]), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn max_model_picks_most_confident() {
        let a = pm(&[&[0.9f64.ln(), 0.1f64.ln()]]);
        let b = pm(&[&[0.6f64.ln(), 0.4f64.ln()]]);
        let out = max_model_predictor(&[b.clone(), a.clone()]).unwrap();
        assert!(close(out.scores(), &[0.9, 0.1], 1e-12));
        let single = max_model_predictor(std::slice::from_ref(&b)).unwrap();
        assert_eq!(single.scores(), b.softmax().scores());
    }

    #[test]
    fn max_model_tie_prefers_first() {
        let a = pm(&[&[2.0, 0.0]]);
        let b = pm(&[&[0.0, 2.0]]);
        let out = max_model_predictor(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(out.scores(), a.softmax().scores());
        let out = max_model_predictor(&[b.clone(), a]).unwrap();
        assert_eq!(out.scores(), b.softmax().scores());
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(simple_ensemble(&[]), Err(EvalError::EmptyEnsemble)));
        let a = pm(&[&[1.0, 2.0]]);
        let b = pm(&[&[1.0, 2.0, 3.0]]);
        assert!(matches!(simple_ensemble(&[a, b]), Err(EvalError::ShapeMismatch(_))));
        assert!(PredictionMatrix::new("x", 0, 3, vec![]).is_err());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(pm(&[&[1.0, 3.0, 3.0], &[0.0, 0.0, 0.0]]).argmax(), vec![1, 0]);
    }

    #[test]
    fn method_names() {
        assert_eq!("simple_ensemble".parse::<EnsembleMethod>().unwrap(), EnsembleMethod::Simple);
        assert_eq!("max_model_predictor".parse::<EnsembleMethod>().unwrap(), EnsembleMethod::MaxModel);
        assert!("vote".parse::<EnsembleMethod>().is_err());
    }
}
