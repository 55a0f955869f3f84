//! Isotropic merging flattens the singular spectrum of the summed task
//! vector of each 2-D parameter.
//!
//! cargo run --example isotropic_merge

use fusionkit::merge::isotropic_merge;
use fusionkit::tensor::svd_2d;
use fusionkit::{DType, ModelPool, Tensor, TensorMap};

fn model(w: &[f64]) -> TensorMap {
    let mut m = TensorMap::new();
    m.insert("w", Tensor::from_f64(DType::F64, vec![2, 3], w).unwrap());
    m
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pool = ModelPool::from_maps(
        Some(model(&[0.0; 6])),
        [model(&[3.0, 0.0, 0.5, 0.0, 0.2, 0.0]), model(&[0.5, 0.1, 0.0, 0.0, 0.3, 0.1])],
    );
    let sum: Vec<f64> = [3.5, 0.1, 0.5, 0.0, 0.5, 0.1].to_vec();
    let before = svd_2d(&Tensor::from_f64(DType::F64, vec![2, 3], &sum)?)?;
    let merged = isotropic_merge(&pool)?;
    let after = svd_2d(merged.get("w").unwrap())?;
    println!("singular values of Στ:    {:?}", before.s);
    println!("singular values of merge: {:?}", after.s);
    Ok(())
}
