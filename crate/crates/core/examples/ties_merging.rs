//! TIES merging: trim small task-vector entries, elect a sign per
//! coordinate, average only the agreeing values.
//!
//! cargo run --example ties_merging

use fusionkit::merge::{ties_merge_flat, ties_merging};
use fusionkit::{ModelPool, Tensor, TensorMap};

fn model(w: &[f32]) -> TensorMap {
    let mut m = TensorMap::new();
    m.insert("w", Tensor::from_f32(vec![w.len()], w).unwrap());
    m
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let taus = vec![vec![1.0, -0.1, 0.5, -2.0], vec![0.8, 0.2, -0.6, 1.0], vec![-0.3, 0.05, 0.4, -1.5]];
    for k in [1.0, 0.5, 0.25] {
        println!("k = {k:<4}  merged τ = {:?}", ties_merge_flat(&taus, k)?);
    }

    let base = model(&[0.0; 4]);
    let models = taus.iter().map(|t| model(&t.iter().map(|v| *v as f32).collect::<Vec<_>>()));
    let pool = ModelPool::from_maps(Some(base), models);
    let merged = ties_merging(&pool, 1.0, 0.5)?;
    println!("θ = base + 1.0·τ_ties = {:?}", merged.get("w").unwrap().to_f64_vec());
    Ok(())
}
