//! Cosine similarity between task vectors.
//!
//! cargo run --example taskvector_cosine

use fusionkit::{synth, ModelPool, ModelSource};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = synth::generate(7);
    let mut pool = ModelPool::new().with_base(ModelSource::memory(fx.base.clone()));
    for (name, m) in &fx.experts {
        pool.add_model(name.clone(), ModelSource::memory(m.clone()))?;
    }
    // a third model halfway between the experts
    let mid = fusionkit::merge::task_arithmetic(&pool, 0.5)?;
    pool.add_model("midpoint", ModelSource::memory(mid))?;
    print!("{}", pool.task_vector_cosine_matrix()?);
    Ok(())
}
