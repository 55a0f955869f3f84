use crate::tensor::{Tensor, TensorMap};

use super::MergeError;

/// Zeroes the `⌊s·numel⌋` smallest-magnitude entries of every tensor.
///
/// Ties in magnitude prune the lower flat index first. Retained entries are
/// copied byte for byte.
pub fn magnitude_prune(m: &TensorMap, sparsity: f64) -> Result<TensorMap, MergeError> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(MergeError::InvalidSparsity(sparsity));
    }
    let mut out = TensorMap::new();
    for (key, t) in m.iter() {
        let n = t.numel();
        // guard against products like 0.29 * 100 = 28.999999999999996
        let n_prune = ((sparsity * n as f64) + 1e-9).floor() as usize;
        let mut bytes = t.bytes().to_vec();
        if n_prune > 0 {
            let values = t.to_f64_vec();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
            let w = t.dtype().byte_width();
            for &i in &order[..n_prune.min(n)] {
                bytes[i * w..(i + 1) * w].fill(0);
            }
        }
        out.insert(
            key.clone(),
            Tensor::from_raw(t.dtype(), t.shape().to_vec(), bytes).expect("same layout"),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: &[f32]) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("w", Tensor::from_f32(vec![v.len()], v).unwrap());
        m
    }

    #[test]
    fn examples() {
        let m = one(&[3.0, -1.0, 2.0, 0.5]);
        assert_eq!(magnitude_prune(&m, 0.0).unwrap(), m);
        let p = magnitude_prune(&m, 0.5).unwrap();
        assert_eq!(p.get("w").unwrap().to_f64_vec(), vec![3.0, 0.0, 2.0, 0.0]);
        let p = magnitude_prune(&one(&[1.0; 4]), 0.5).unwrap();
        assert_eq!(p.get("w").unwrap().to_f64_vec(), vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn invalid_sparsity() {
        let m = one(&[1.0]);
        assert!(matches!(magnitude_prune(&m, 1.0), Err(MergeError::InvalidSparsity(_))));
        assert!(matches!(magnitude_prune(&m, -0.1), Err(MergeError::InvalidSparsity(_))));
        assert!(matches!(magnitude_prune(&m, f64::NAN), Err(MergeError::InvalidSparsity(_))));
    }

    #[test]
    fn floor_is_robust_to_representation_error() {
        let m = one(&(1..=100).map(|v| v as f32).collect::<Vec<_>>());
        let p = magnitude_prune(&m, 0.29).unwrap();
        let zeros = p.get("w").unwrap().to_f64_vec().iter().filter(|v| **v == 0.0).count();
        assert_eq!(zeros, 29);
    }
}
