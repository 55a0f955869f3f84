//! Algorithms over task vectors `τᵢ = θᵢ − θ_base`. All of them need a base.

use crate::linalg;
use crate::pool::{ModelPool, PoolError};
use crate::tensor::{DType, Tensor, TensorError, TensorMap};

use super::{key_ranges, require_models, MaskSet, MergeError};

struct Deltas {
    base: TensorMap,
    base_flat: Vec<f64>,
    names: Vec<String>,
    taus: Vec<Vec<f64>>,
}

fn load_deltas(pool: &ModelPool) -> Result<Deltas, MergeError> {
    if !pool.has_base() {
        return Err(PoolError::NoBaseModel.into());
    }
    require_models(pool)?;
    let base = pool.load_base()?;
    let tvs = pool.task_vectors()?;
    Ok(Deltas {
        base_flat: base.flatten(),
        base,
        names: tvs.iter().map(|t| t.name.clone()).collect(),
        taus: tvs.iter().map(|t| t.delta.flatten()).collect(),
    })
}

fn sum_taus(taus: &[Vec<f64>], len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for tau in taus {
        for (a, t) in acc.iter_mut().zip(tau) {
            *a += t;
        }
    }
    acc
}

/// `θ_base + λ · Σ τᵢ`.
pub fn task_arithmetic(pool: &ModelPool, scaling: f64) -> Result<TensorMap, MergeError> {
    if !scaling.is_finite() {
        return Err(MergeError::NonFiniteParameter { name: "scaling", value: scaling });
    }
    let d = load_deltas(pool)?;
    let sum = sum_taus(&d.taus, d.base_flat.len());
    let merged: Vec<f64> = d.base_flat.iter().zip(&sum).map(|(b, s)| b + scaling * s).collect();
    Ok(pool.finish(d.base.unflatten_like(&merged)?)?)
}

/// Number of entries kept when trimming to the top `k` fraction of `len`.
pub(crate) fn trim_count(k: f64, len: usize) -> usize {
    // the small offset keeps exact products such as 0.2 * 10 from rounding up
    (((k * len as f64) - 1e-9).ceil().max(0.0) as usize).min(len)
}

/// The trim / elect / disjoint-merge stages on flattened task vectors;
/// returns the merged task vector.
///
/// * trim: per model keep the top `⌈k·d⌉` entries by magnitude (ties keep
///   the lower index), zero the rest
/// * elect: per coordinate the sign of the sum of trimmed values, `+` on zero
/// * merge: mean of the trimmed values strictly agreeing with the elected
///   sign, `0` when there are none
pub fn ties_merge_flat(taus: &[Vec<f64>], trim_fraction: f64) -> Result<Vec<f64>, MergeError> {
    if !(trim_fraction > 0.0 && trim_fraction <= 1.0) {
        return Err(MergeError::InvalidTrimFraction(trim_fraction));
    }
    let Some(first) = taus.first() else {
        return Err(MergeError::EmptyPool);
    };
    let len = first.len();
    let keep = trim_count(trim_fraction, len);

    let trimmed: Vec<Vec<f64>> = taus
        .iter()
        .map(|tau| {
            let mut order: Vec<usize> = (0..len).collect();
            order.sort_by(|&a, &b| tau[b].abs().total_cmp(&tau[a].abs()).then(a.cmp(&b)));
            let mut out = vec![0.0; len];
            for &i in &order[..keep] {
                out[i] = tau[i];
            }
            out
        })
        .collect();

    Ok((0..len)
        .map(|j| {
            let total: f64 = trimmed.iter().map(|t| t[j]).sum();
            let positive = total >= 0.0;
            let (sum, count) = trimmed
                .iter()
                .map(|t| t[j])
                .filter(|&v| if positive { v > 0.0 } else { v < 0.0 })
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect())
}

/// TIES-merging: `θ_base + λ · ties(τ₁…τ_N)`, trimming globally over all
/// filtered elements of each model.
pub fn ties_merging(pool: &ModelPool, scaling: f64, trim_fraction: f64) -> Result<TensorMap, MergeError> {
    if !(trim_fraction > 0.0 && trim_fraction <= 1.0) {
        return Err(MergeError::InvalidTrimFraction(trim_fraction));
    }
    if !scaling.is_finite() {
        return Err(MergeError::NonFiniteParameter { name: "scaling", value: scaling });
    }
    let d = load_deltas(pool)?;
    let merged_tau = ties_merge_flat(&d.taus, trim_fraction)?;
    let merged: Vec<f64> = d
        .base_flat
        .iter()
        .zip(&merged_tau)
        .map(|(b, t)| b + scaling * t)
        .collect();
    Ok(pool.finish(d.base.unflatten_like(&merged)?)?)
}

/// TALL masks. The merged model is `θ_base + Σ τᵢ`; model `i`'s mask is 1
/// where `|τᵢ| ≥ λ·|Σ τ − τᵢ|`.
pub fn tall_mask(pool: &ModelPool, scaling: f64) -> Result<(TensorMap, MaskSet), MergeError> {
    if !scaling.is_finite() {
        return Err(MergeError::NonFiniteParameter { name: "scaling", value: scaling });
    }
    let d = load_deltas(pool)?;
    let total = sum_taus(&d.taus, d.base_flat.len());
    let merged: Vec<f64> = d.base_flat.iter().zip(&total).map(|(b, s)| b + s).collect();

    let mut masks = MaskSet::new();
    for (name, tau) in d.names.iter().zip(&d.taus) {
        let bits: Vec<f64> = tau
            .iter()
            .zip(&total)
            .map(|(t, s)| if t.abs() >= scaling * (s - t).abs() { 1.0 } else { 0.0 })
            .collect();
        let mask = key_ranges(&d.base)
            .into_iter()
            .map(|(k, shape, r)| Ok((k, Tensor::from_f64(DType::U8, shape, &bits[r])?)))
            .collect::<Result<TensorMap, TensorError>>()?;
        masks.insert(name.clone(), mask);
    }
    Ok((pool.finish(d.base.unflatten_like(&merged)?)?, masks))
}

/// Isotropic merging. For every 2-D key the summed task vector `Δ = U S Vᵀ`
/// is replaced by `σ̄ · U Vᵀ` with `σ̄` the mean singular value; other keys
/// get the averaged task vector. The result is added to the base.
pub fn isotropic_merge(pool: &ModelPool) -> Result<TensorMap, MergeError> {
    let d = load_deltas(pool)?;
    let n = d.taus.len() as f64;
    let total = sum_taus(&d.taus, d.base_flat.len());
    let mut merged = d.base_flat.clone();
    for (_, shape, range) in key_ranges(&d.base) {
        let delta = &total[range.clone()];
        let out = &mut merged[range];
        if let [rows, cols] = shape[..] {
            let m = linalg::Matrix::from_vec(rows, cols, delta.to_vec());
            let svd = linalg::svd(&m).map_err(|e| TensorError::NoConvergence(e.0))?;
            if svd.s.is_empty() {
                continue;
            }
            let mean = svd.s.iter().sum::<f64>() / svd.s.len() as f64;
            let iso = svd.u.matmul(&svd.vt).scale(mean);
            for (o, v) in out.iter_mut().zip(iso.as_slice()) {
                *o += v;
            }
        } else {
            for (o, v) in out.iter_mut().zip(delta) {
                *o += v / n;
            }
        }
    }
    Ok(pool.finish(d.base.unflatten_like(&merged)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: &[f32]) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("w", Tensor::from_f32(vec![v.len()], v).unwrap());
        m
    }

    fn mat(v: &[f64], rows: usize, cols: usize) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("w", Tensor::from_f64(DType::F64, vec![rows, cols], v).unwrap());
        m
    }

    fn w(m: &TensorMap) -> Vec<f64> {
        m.get("w").unwrap().to_f64_vec()
    }

    #[test]
    fn task_arithmetic_examples() {
        let base = one(&[0.0, 0.0]);
        let pool = ModelPool::from_maps(Some(base.clone()), [one(&[1.0, 0.0]), one(&[0.0, 1.0])]);
        assert_eq!(task_arithmetic(&pool, 0.0).unwrap(), base);
        assert_eq!(w(&task_arithmetic(&pool, 0.5).unwrap()), vec![0.5, 0.5]);
        let single = ModelPool::from_maps(Some(one(&[0.25, -3.0])), [one(&[1.5, 2.0])]);
        assert_eq!(task_arithmetic(&single, 1.0).unwrap(), one(&[1.5, 2.0]));
        let no_base = ModelPool::from_maps(None, [base]);
        assert!(matches!(
            task_arithmetic(&no_base, 0.3),
            Err(MergeError::Pool(PoolError::NoBaseModel))
        ));
    }

    #[test]
    fn trim_count_is_exact_for_round_products() {
        assert_eq!(trim_count(0.2, 10), 2);
        assert_eq!(trim_count(0.5, 2), 1);
        assert_eq!(trim_count(0.25, 8), 2);
        assert_eq!(trim_count(0.3, 8), 3);
        assert_eq!(trim_count(1.0, 7), 7);
        assert_eq!(trim_count(1e-6, 7), 1);
        assert_eq!(trim_count(0.5, 0), 0);
    }

    #[test]
    fn ties_two_models_opposite_signs() {
        let merged = ties_merge_flat(&[vec![2.0], vec![-1.0]], 1.0).unwrap();
        assert_eq!(merged, vec![2.0]);
        let pool = ModelPool::from_maps(Some(one(&[1.0])), [one(&[3.0]), one(&[0.0])]);
        assert_eq!(w(&ties_merging(&pool, 0.3, 1.0).unwrap()), vec![(1.0 + 0.3 * 2.0) as f32 as f64]);
    }

    #[test]
    fn ties_three_models_hand_executed() {
        // keep top-1 per model: [3,0], [0,-4], [0,2]
        // elect: [+3 → +, -2 → -]; merge: [3, -4]
        let taus = [vec![3.0, -1.0], vec![1.0, -4.0], vec![-0.1, 2.0]];
        assert_eq!(ties_merge_flat(&taus, 0.5).unwrap(), vec![3.0, -4.0]);
    }

    #[test]
    fn ties_zero_sum_elects_positive() {
        let merged = ties_merge_flat(&[vec![1.0], vec![-1.0]], 1.0).unwrap();
        assert_eq!(merged, vec![1.0]);
        let merged = ties_merge_flat(&[vec![0.0], vec![0.0]], 1.0).unwrap();
        assert_eq!(merged, vec![0.0]);
    }

    #[test]
    fn ties_invalid_trim_fraction() {
        let pool = ModelPool::from_maps(Some(one(&[1.0])), [one(&[3.0])]);
        for k in [0.0, 1.5, f64::NAN] {
            assert!(matches!(ties_merging(&pool, 0.3, k), Err(MergeError::InvalidTrimFraction(_))));
        }
    }

    #[test]
    fn tall_hand_evaluated_masks() {
        let base = one(&[0.0, 0.0]);
        let pool = ModelPool::from_maps(Some(base), [one(&[3.0, 0.1]), one(&[1.0, 2.0])]);
        let (merged, masks) = tall_mask(&pool, 1.0).unwrap();
        assert_eq!(w(&masks["model_0"]), vec![1.0, 0.0]);
        assert_eq!(w(&masks["model_1"]), vec![0.0, 1.0]);
        assert_eq!(masks["model_0"].get("w").unwrap().dtype(), DType::U8);
        assert_eq!(w(&merged), vec![4.0, 2.1f32 as f64]);

        let (_, masks) = tall_mask(&pool, 0.0).unwrap();
        assert!(masks.values().all(|m| w(m).iter().all(|v| *v == 1.0)));
    }

    #[test]
    fn tall_single_model_is_all_ones() {
        let pool = ModelPool::from_maps(Some(one(&[0.0, 0.0])), [one(&[0.0, 5.0])]);
        let (_, masks) = tall_mask(&pool, 7.0).unwrap();
        assert_eq!(w(&masks["model_0"]), vec![1.0, 1.0]);
    }

    #[test]
    fn isotropic_diagonal_delta() {
        let base = mat(&[0.0; 4], 2, 2);
        let pool = ModelPool::from_maps(Some(base), [mat(&[3.0, 0.0, 0.0, 1.0], 2, 2)]);
        let out = isotropic_merge(&pool).unwrap();
        let got = w(&out);
        for (g, e) in got.iter().zip([2.0, 0.0, 0.0, 2.0]) {
            assert!((g - e).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn isotropic_keeps_already_isotropic_delta() {
        let (c, s) = (0.6, 0.8);
        let base = mat(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        let ft = mat(&[1.0 + 2.0 * c, 2.0 - 2.0 * s, 3.0 + 2.0 * s, 4.0 + 2.0 * c], 2, 2);
        let pool = ModelPool::from_maps(Some(base), [ft.clone()]);
        let out = isotropic_merge(&pool).unwrap();
        for (g, e) in w(&out).iter().zip(w(&ft)) {
            assert!((g - e).abs() < 1e-5);
        }
    }

    #[test]
    fn isotropic_vectors_get_averaged_delta() {
        let pool = ModelPool::from_maps(Some(one(&[1.0])), [one(&[3.0]), one(&[5.0])]);
        assert_eq!(w(&isotropic_merge(&pool).unwrap()), vec![4.0]);
    }
}
