//! Task arithmetic on the synthetic two-task fixtures: sweep the scaling
//! coefficient and watch per-task accuracy.
//!
//! cargo run --example task_arithmetic

use fusionkit::merge::task_arithmetic;
use fusionkit::{evaluate, synth, ModelPool, ModelSource};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = synth::generate(7);
    let mut pool = ModelPool::new().with_base(ModelSource::memory(fx.base.clone()));
    for (name, m) in &fx.experts {
        pool.add_model(name.clone(), ModelSource::memory(m.clone()))?;
    }

    for lambda in [0.0, 0.1, 0.3, 0.5, 1.0] {
        let merged = task_arithmetic(&pool, lambda)?;
        let report = evaluate(&merged, &fx.datasets)?;
        println!(
            "λ = {lambda:.1}  task_a {:.3}  task_b {:.3}  avg {:.3}",
            report.tasks["task_a"], report.tasks["task_b"], report.average
        );
    }
    Ok(())
}
