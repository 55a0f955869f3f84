//! Merge only the shared body; the classification head is excluded by a key
//! filter and copied from a designated carrier model.
//!
//! cargo run --example heads_kept_separate

use fusionkit::merge::simple_average;
use fusionkit::{KeyFilter, ModelPool, Tensor, TensorMap};

fn model(body: f32, head: f32) -> TensorMap {
    let mut m = TensorMap::new();
    m.insert("body.weight", Tensor::from_f32(vec![2], &[body, body]).unwrap());
    m.insert("head.weight", Tensor::from_f32(vec![2], &[head, head]).unwrap());
    m
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pool = ModelPool::from_maps(None, [model(1.0, 10.0), model(3.0, 20.0)])
        .with_key_filter(KeyFilter::exclude(["head.*"]))
        .with_carrier("model_1");
    println!("merged keys: {:?}", pool.merge_keys()?);
    let merged = simple_average(&pool)?;
    for (k, t) in merged.iter() {
        println!("{k}: {:?}", t.to_f64_vec());
    }
    Ok(())
}
