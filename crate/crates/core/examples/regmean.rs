//! RegMean: merge a linear layer so its outputs match each model's outputs
//! on that model's own inputs, using input Gram matrices as statistics.
//!
//! cargo run --example regmean

use fusionkit::linalg::Matrix;
use fusionkit::merge::{regmean_detailed, simple_average};
use fusionkit::{DType, ModelPool, ModelSource, Tensor, TensorMap};

fn layer(w: &[f64], b: &[f64]) -> TensorMap {
    let mut m = TensorMap::new();
    m.insert("fc.weight", Tensor::from_f64(DType::F32, vec![2, 2], w).unwrap());
    m.insert("fc.bias", Tensor::from_f64(DType::F32, vec![2], b).unwrap());
    m
}

fn gram(inputs: &Matrix) -> TensorMap {
    let g = inputs.transpose().matmul(inputs);
    let mut m = TensorMap::new();
    m.insert("fc.weight", Tensor::from_matrix(DType::F64, &g));
    m
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // model a sees inputs along x, model b along y
    let xa = Matrix::from_vec(3, 2, vec![1.0, 0.0, 2.0, 0.1, -1.0, 0.0]);
    let xb = Matrix::from_vec(3, 2, vec![0.0, 1.0, 0.1, 2.0, 0.0, -1.0]);
    let pool = ModelPool::new()
        .with_model("a", ModelSource::memory(layer(&[1.0, 5.0, 0.0, 5.0], &[0.0, 0.0])))?
        .with_model("b", ModelSource::memory(layer(&[5.0, 1.0, 5.0, 0.0], &[1.0, 1.0])))?
        .with_stats("a", ModelSource::memory(gram(&xa)))
        .with_stats("b", ModelSource::memory(gram(&xb)));

    let out = regmean_detailed(&pool, 0.9)?;
    println!("regmean fc.weight: {:?}", out.merged.get("fc.weight").unwrap().to_f64_vec());
    println!("solved {:?}, averaged {:?}", out.solved_keys, out.fallback_keys);
    let avg = simple_average(&pool)?;
    println!("plain average:     {:?}", avg.get("fc.weight").unwrap().to_f64_vec());
    Ok(())
}
