//! A user-defined fusion algorithm plugged into the config-driven pipeline.
//!
//! cargo run --example custom_algorithm

use fusionkit::merge::{MergeError, MergeOutcome, MergeReport};
use fusionkit::{pipeline, synth, FusionAlgorithm, ModelPool, RunConfig};

/// Adds to the base, per coordinate, the task-vector entry of largest
/// magnitude.
struct LargestDelta;

impl FusionAlgorithm for LargestDelta {
    fn name(&self) -> &str {
        "largest_delta"
    }

    fn run(&self, pool: &ModelPool) -> Result<MergeOutcome, MergeError> {
        let base = pool.load_base()?;
        let taus: Vec<Vec<f64>> = pool.task_vectors()?.iter().map(|t| t.delta.flatten()).collect();
        let mut theta = base.flatten();
        for (j, v) in theta.iter_mut().enumerate() {
            *v += taus.iter().map(|t| t[j]).fold(0.0, |best: f64, x| if x.abs() > best.abs() { x } else { best });
        }
        let merged = pool.finish(base.unflatten_like(&theta)?)?;
        Ok(MergeOutcome {
            merged,
            masks: None,
            report: MergeReport {
                algorithm: self.name().into(),
                parameters: serde_json::json!({}),
                models: pool.model_names().iter().map(|s| s.to_string()).collect(),
                carried_keys: vec![],
                fallback_keys: vec![],
                elapsed_ms: 0.0,
            },
        })
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    synth::synth_fixtures(7, dir.path())?;
    let cfg: RunConfig = fusionkit::config::load_config(dir.path().join("pipeline.yaml"), &["merged_model_save_path=custom.safetensors"])?;
    let out = pipeline::run_with(&cfg, &LargestDelta)?;
    print!("{}", out.eval_report.expect("taskpool configured").to_json());
    Ok(())
}
