use crate::linalg::{self, Matrix};
use crate::pool::ModelPool;
use crate::tensor::{Tensor, TensorMap};

use super::{key_ranges, require_models, MergeError};

/// Per-key arithmetic mean: accumulate, then divide by the model count.
pub fn simple_average(pool: &ModelPool) -> Result<TensorMap, MergeError> {
    require_models(pool)?;
    let models = pool.load_models()?;
    let merged = mean_of(&models)?;
    Ok(pool.finish(merged)?)
}

fn mean_of(models: &[TensorMap]) -> Result<TensorMap, MergeError> {
    let template = &models[0];
    let n = models.len() as f64;
    let mut acc = vec![0.0f64; template.numel()];
    for m in models {
        for (a, v) in acc.iter_mut().zip(m.flatten()) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(template.unflatten_like(&acc)?)
}

fn check_weights(weights: &[f64], n: usize) -> Result<(), MergeError> {
    if weights.len() != n {
        return Err(MergeError::LengthMismatch {
            expected: n,
            found: weights.len(),
        });
    }
    if let Some((index, &value)) = weights.iter().enumerate().find(|(_, w)| w.is_nan() || **w < 0.0) {
        return Err(MergeError::NegativeWeight { index, value });
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(MergeError::ZeroWeightSum);
    }
    Ok(())
}

/// Normalized weighted mean `Σ wᵢ θᵢ / Σ wᵢ`.
///
/// Weights are first rescaled by their maximum, so uniform weights become
/// exactly 1 and the result is bitwise equal to [`simple_average`].
pub fn weighted_average(pool: &ModelPool, weights: &[f64]) -> Result<TensorMap, MergeError> {
    require_models(pool)?;
    check_weights(weights, pool.len())?;
    let models = pool.load_models()?;
    let max = weights.iter().cloned().fold(0.0, f64::max);
    let rel: Vec<f64> = weights.iter().map(|w| w / max).collect();
    let total: f64 = rel.iter().sum();

    let template = &models[0];
    let mut acc = vec![0.0f64; template.numel()];
    for (m, &w) in models.iter().zip(&rel) {
        for (a, v) in acc.iter_mut().zip(m.flatten()) {
            *a += w * v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Ok(pool.finish(template.unflatten_like(&acc)?)?)
}

/// Loads a statistics map for every model, failing on the first absent one.
fn load_all_stats(pool: &ModelPool) -> Result<Vec<TensorMap>, MergeError> {
    pool.model_names()
        .into_iter()
        .map(|name| {
            pool.load_stats(name)?.ok_or_else(|| MergeError::MissingStats {
                model: name.to_string(),
                key: None,
            })
        })
        .collect()
}

/// Per-element Fisher-weighted mean `Σ (Fᵢ+ε) θᵢ / Σ (Fᵢ+ε)`.
pub fn fisher_merging(pool: &ModelPool, epsilon: f64) -> Result<TensorMap, MergeError> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(MergeError::InvalidEpsilon(epsilon));
    }
    require_models(pool)?;
    let models = pool.load_models()?;
    let stats = load_all_stats(pool)?;
    let names = pool.model_names();
    let template = &models[0];

    let mut fishers = Vec::with_capacity(models.len());
    for (name, s) in names.iter().zip(&stats) {
        let mut flat = Vec::with_capacity(template.numel());
        for (key, t) in template.iter() {
            let f = s.get(key).ok_or_else(|| MergeError::MissingStats {
                model: name.to_string(),
                key: Some(key.clone()),
            })?;
            if f.shape() != t.shape() {
                return Err(MergeError::StatsShapeMismatch {
                    model: name.to_string(),
                    key: key.clone(),
                    expected: t.shape().to_vec(),
                    found: f.shape().to_vec(),
                });
            }
            let vals = f.to_f64_vec();
            if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(MergeError::NegativeFisher {
                    model: name.to_string(),
                    key: key.clone(),
                });
            }
            flat.extend(vals);
        }
        fishers.push(flat);
    }

    let flats: Vec<Vec<f64>> = models.iter().map(TensorMap::flatten).collect();
    let n = models.len() as f64;
    let merged: Vec<f64> = (0..template.numel())
        .map(|j| {
            let mut num = 0.0;
            let mut den = 0.0;
            let mut plain = 0.0;
            for (theta, fisher) in flats.iter().zip(&fishers) {
                let w = fisher[j] + epsilon;
                num += w * theta[j];
                den += w;
                plain += theta[j];
            }
            // all-zero weights with epsilon = 0: fall back to the plain mean
            if den > 0.0 {
                num / den
            } else {
                plain / n
            }
        })
        .collect();
    Ok(pool.finish(template.unflatten_like(&merged)?)?)
}

#[derive(Debug, Clone)]
pub struct RegMeanOutput {
    pub merged: TensorMap,
    /// 2-D keys merged by solving the Gram system.
    pub solved_keys: Vec<String>,
    /// Keys without Gram matrices, merged by simple average.
    pub fallback_keys: Vec<String>,
}

pub fn regmean(pool: &ModelPool, alpha: f64) -> Result<TensorMap, MergeError> {
    Ok(regmean_detailed(pool, alpha)?.merged)
}

/// RegMean over 2-D keys with Gram matrices; every other key is averaged.
///
/// For a weight `W` of shape `m×n` each model supplies the `n×n` Gram of the
/// layer's inputs under the same key. With `Ĝ = α·G + (1−α)·diag(G)` the
/// merged weight solves `(Σ Ĝᵢ) · W*ᵀ = Σ Ĝᵢ · Wᵢᵀ`.
pub fn regmean_detailed(pool: &ModelPool, alpha: f64) -> Result<RegMeanOutput, MergeError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MergeError::InvalidRegularizer(alpha));
    }
    require_models(pool)?;
    let models = pool.load_models()?;
    let stats = load_all_stats(pool)?;
    let names = pool.model_names();
    let template = &models[0];

    let mut out = TensorMap::new();
    let mut solved_keys = Vec::new();
    let mut fallback_keys = Vec::new();
    for (key, shape, _) in key_ranges(template) {
        let dtype = template.get(&key).expect("template key").dtype();
        let grams: Vec<Option<&Tensor>> = stats.iter().map(|s| s.get(&key)).collect();
        let is_matrix = shape.len() == 2;
        if !is_matrix || grams.iter().all(Option::is_none) {
            let per_model: Vec<TensorMap> = models.iter().map(|m| m.select([key.as_str()])).collect();
            for (k, t) in mean_of(&per_model)? {
                out.insert(k, t);
            }
            fallback_keys.push(key);
            continue;
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut lhs = Matrix::zeros(cols, cols);
        let mut rhs = Matrix::zeros(cols, rows);
        for ((name, gram), model) in names.iter().zip(&grams).zip(&models) {
            let gram = gram.ok_or_else(|| MergeError::MissingStats {
                model: name.to_string(),
                key: Some(key.clone()),
            })?;
            if gram.shape() != [cols, cols] {
                return Err(MergeError::GramShapeMismatch {
                    model: name.to_string(),
                    key: key.clone(),
                    expected: vec![cols, cols],
                    found: gram.shape().to_vec(),
                });
            }
            let mut g = gram.to_matrix()?;
            for i in 0..cols {
                for j in 0..cols {
                    if i != j {
                        g[(i, j)] *= alpha;
                    }
                }
            }
            let w = model.get(&key).expect("validated").to_matrix()?;
            rhs.add_assign(&g.matmul(&w.transpose()));
            lhs.add_assign(&g);
        }
        let solution = linalg::solve(&lhs, &rhs).map_err(|_| MergeError::SingularSystem(key.clone()))?;
        out.insert(key.clone(), Tensor::from_matrix(dtype, &solution.transpose()));
        solved_keys.push(key);
    }
    if !fallback_keys.is_empty() {
        log::debug!("regmean fell back to averaging for {} keys", fallback_keys.len());
    }
    Ok(RegMeanOutput {
        merged: pool.finish(out)?,
        solved_keys,
        fallback_keys,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::ModelSource;
    use crate::tensor::DType;

    fn one(v: &[f32]) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("w", Tensor::from_f32(vec![v.len()], v).unwrap());
        m
    }

    fn w(m: &TensorMap) -> Vec<f64> {
        m.get("w").unwrap().to_f64_vec()
    }

    #[test]
    fn simple_average_examples() {
        let pool = ModelPool::from_maps(None, [one(&[0.0]), one(&[2.0])]);
        assert_eq!(w(&simple_average(&pool).unwrap()), vec![1.0]);
        let pool = ModelPool::from_maps(None, vec![one(&[0.3]); 3]);
        assert_eq!(simple_average(&pool).unwrap(), one(&[0.3]));
        assert!(matches!(
            simple_average(&ModelPool::new()),
            Err(MergeError::Pool(crate::pool::PoolError::EmptyPool)) | Err(MergeError::EmptyPool)
        ));
    }

    #[test]
    fn weighted_average_examples() {
        let pool = ModelPool::from_maps(None, [one(&[0.0]), one(&[3.0])]);
        assert_eq!(w(&weighted_average(&pool, &[2.0, 1.0]).unwrap()), vec![1.0]);
        assert_eq!(w(&weighted_average(&pool, &[1.0, 0.0]).unwrap()), vec![0.0]);
        assert_eq!(
            weighted_average(&pool, &[0.7, 0.7]).unwrap(),
            simple_average(&pool).unwrap()
        );
        assert!(matches!(
            weighted_average(&pool, &[-1.0, 2.0]),
            Err(MergeError::NegativeWeight { index: 0, .. })
        ));
        assert!(matches!(weighted_average(&pool, &[0.0, 0.0]), Err(MergeError::ZeroWeightSum)));
        assert!(matches!(
            weighted_average(&pool, &[1.0]),
            Err(MergeError::LengthMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn fisher_hand_computed() {
        let pool = ModelPool::from_maps(None, [one(&[3.0]), one(&[0.0])])
            .with_stats("model_0", ModelSource::memory(one(&[2.0])))
            .with_stats("model_1", ModelSource::memory(one(&[1.0])));
        assert_eq!(w(&fisher_merging(&pool, 0.0).unwrap()), vec![2.0]);
    }

    #[test]
    fn fisher_errors() {
        let pool = ModelPool::from_maps(None, [one(&[3.0]), one(&[0.0])])
            .with_stats("model_0", ModelSource::memory(one(&[2.0])));
        assert!(matches!(
            fisher_merging(&pool, 1e-8),
            Err(MergeError::MissingStats { model, key: None }) if model == "model_1"
        ));
        let pool = pool.with_stats("model_1", ModelSource::memory(one(&[-1.0])));
        assert!(matches!(fisher_merging(&pool, 1e-8), Err(MergeError::NegativeFisher { .. })));
        assert!(matches!(fisher_merging(&pool, -1.0), Err(MergeError::InvalidEpsilon(_))));
    }

    #[test]
    fn fisher_zero_weights_fall_back_to_mean() {
        let pool = ModelPool::from_maps(None, [one(&[3.0]), one(&[1.0])])
            .with_stats("model_0", ModelSource::memory(one(&[0.0])))
            .with_stats("model_1", ModelSource::memory(one(&[0.0])));
        assert_eq!(w(&fisher_merging(&pool, 0.0).unwrap()), vec![2.0]);
    }

    fn layer(vals: &[f64], rows: usize, cols: usize) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("fc.weight", Tensor::from_f64(DType::F64, vec![rows, cols], vals).unwrap());
        m.insert("fc.bias", Tensor::from_f64(DType::F64, vec![rows], &vals[..rows]).unwrap());
        m
    }

    fn gram(vals: &[f64], n: usize) -> ModelSource {
        let mut m = TensorMap::new();
        m.insert("fc.weight", Tensor::from_f64(DType::F64, vec![n, n], vals).unwrap());
        ModelSource::memory(m)
    }

    #[test]
    fn regmean_single_model_recovers_weights() {
        let pool = ModelPool::from_maps(None, [layer(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2)])
            .with_stats("model_0", gram(&[2.0, 0.5, 0.5, 1.0], 2));
        let out = regmean_detailed(&pool, 0.9).unwrap();
        let got = out.merged.get("fc.weight").unwrap().to_f64_vec();
        for (g, e) in got.iter().zip([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]) {
            assert!((g - e).abs() < 1e-9);
        }
        assert_eq!(out.solved_keys, vec!["fc.weight"]);
        assert_eq!(out.fallback_keys, vec!["fc.bias"]);
    }

    #[test]
    fn regmean_errors() {
        let a = layer(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        let pool = ModelPool::from_maps(None, [a.clone(), a.clone()])
            .with_stats("model_0", gram(&[1.0, 0.0, 0.0, 1.0], 2))
            .with_stats("model_1", ModelSource::memory(TensorMap::new()));
        assert!(matches!(
            regmean(&pool, 0.9),
            Err(MergeError::MissingStats { model, key: Some(_) }) if model == "model_1"
        ));
        let pool = ModelPool::from_maps(None, [a.clone()]).with_stats("model_0", gram(&[1.0; 9], 3));
        assert!(matches!(regmean(&pool, 0.9), Err(MergeError::GramShapeMismatch { .. })));
        let pool = ModelPool::from_maps(None, [a.clone()]).with_stats("model_0", gram(&[0.0; 4], 2));
        assert!(matches!(regmean(&pool, 0.9), Err(MergeError::SingularSystem(k)) if k == "fc.weight"));
        assert!(matches!(regmean(&pool, 1.5), Err(MergeError::InvalidRegularizer(_))));
        let pool = ModelPool::from_maps(None, [a]);
        assert!(matches!(regmean(&pool, 0.5), Err(MergeError::MissingStats { key: None, .. })));
    }
}
