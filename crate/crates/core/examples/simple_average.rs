//! Plain, weighted and Fisher-weighted averaging of in-memory models.
//!
//! cargo run --example simple_average

use fusionkit::merge::{fisher_merging, simple_average, weighted_average};
use fusionkit::{ModelPool, ModelSource, Tensor, TensorMap};

fn model(w: &[f32]) -> TensorMap {
    let mut m = TensorMap::new();
    m.insert("w", Tensor::from_f32(vec![w.len()], w).unwrap());
    m
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pool = ModelPool::from_maps(None, [model(&[1.0, 2.0]), model(&[3.0, 6.0])]);

    let mean = simple_average(&pool)?;
    println!("simple average:   {:?}", mean.get("w").unwrap().to_f64_vec());

    let weighted = weighted_average(&pool, &[3.0, 1.0])?;
    println!("weighted (3:1):   {:?}", weighted.get("w").unwrap().to_f64_vec());

    // Fisher diagonals: model_0 is confident about w[0], model_1 about w[1]
    let pool = pool
        .with_stats("model_0", ModelSource::memory(model(&[9.0, 1.0])))
        .with_stats("model_1", ModelSource::memory(model(&[1.0, 9.0])));
    let fisher = fisher_merging(&pool, 1e-8)?;
    println!("fisher weighted:  {:?}", fisher.get("w").unwrap().to_f64_vec());
    Ok(())
}
