#![allow(dead_code)]

use fusionkit::{DType, Tensor, TensorMap};
use proptest::prelude::*;
use rand::Rng;

/// Shapes of up to three keys `k0`, `k1`, ...
pub fn layout() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(1usize..4, 1..3), 1..4)
}

pub fn numel(layout: &[Vec<usize>]) -> usize {
    layout.iter().map(|s| s.iter().product::<usize>()).sum()
}

pub fn build(layout: &[Vec<usize>], dtype: DType, values: &[f64]) -> TensorMap {
    let mut m = TensorMap::new();
    let mut offset = 0;
    for (i, shape) in layout.iter().enumerate() {
        let n: usize = shape.iter().product();
        m.insert(format!("k{i}"), Tensor::from_f64(dtype, shape.clone(), &values[offset..offset + n]).unwrap());
        offset += n;
    }
    m
}

/// `count` F64 maps sharing one random layout, values in [-10, 10].
pub fn models(count: impl Into<prop::collection::SizeRange>) -> impl Strategy<Value = Vec<TensorMap>> {
    let count = count.into();
    layout().prop_flat_map(move |l| {
        let n = numel(&l);
        prop::collection::vec(prop::collection::vec(-10.0f64..10.0, n), count.clone())
            .prop_map(move |vs| vs.iter().map(|v| build(&l, DType::F64, v)).collect::<Vec<_>>())
    })
}

/// Same layout, integer values so sums are exact.
pub fn integer_models(count: usize) -> impl Strategy<Value = Vec<TensorMap>> {
    layout().prop_flat_map(move |l| {
        let n = numel(&l);
        prop::collection::vec(prop::collection::vec(-1000i32..1000, n), count).prop_map(move |vs| {
            vs.iter()
                .map(|v| build(&l, DType::F64, &v.iter().map(|x| *x as f64).collect::<Vec<_>>()))
                .collect::<Vec<_>>()
        })
    })
}

pub fn random_map<R: Rng>(rng: &mut R, dtype: DType) -> TensorMap {
    let mut m = TensorMap::new();
    for i in 0..rng.gen_range(1..4) {
        let shape: Vec<usize> = (0..rng.gen_range(1..3)).map(|_| rng.gen_range(1..5)).collect();
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        m.insert(format!("layer.{i}"), Tensor::from_f64(dtype, shape, &v).unwrap());
    }
    m
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
