//! TALL masks: per-task binary masks marking where a task's own vector
//! dominates the rest of the multi-task sum.
//!
//! cargo run --example tall_mask

use fusionkit::merge::tall_mask;
use fusionkit::{ModelPool, Tensor, TensorMap};

fn model(w: &[f32]) -> TensorMap {
    let mut m = TensorMap::new();
    m.insert("w", Tensor::from_f32(vec![w.len()], w).unwrap());
    m
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pool = ModelPool::from_maps(
        Some(model(&[0.0; 4])),
        [model(&[2.0, 0.1, 0.0, 1.0]), model(&[0.1, 3.0, 0.0, 1.0])],
    );
    for lambda in [0.0, 0.4, 1.0] {
        let (merged, masks) = tall_mask(&pool, lambda)?;
        println!("λ = {lambda}");
        for (name, m) in &masks {
            println!("  {name} mask {:?}", m.get("w").unwrap().to_i64_vec());
        }
        println!("  merged {:?}", merged.get("w").unwrap().to_f64_vec());
    }
    Ok(())
}
