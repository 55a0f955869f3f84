//! The full config-driven run: generate fixtures, load the YAML config with
//! command-line style overrides, merge, save and evaluate.
//!
//! cargo run --example pipeline

use fusionkit::config::load_config;
use fusionkit::{load_map, pipeline, synth};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let manifest = synth::synth_fixtures(7, dir.path())?;
    for (name, t) in &manifest.tasks {
        println!("expert {name}: {:.3}", t.expert_accuracy);
    }

    for algorithm in ["task_arithmetic", "ties_merging"] {
        let overrides = [format!("method.algorithm={algorithm}"), "method.scaling=0.5".to_string()];
        let cfg = load_config(dir.path().join(&manifest.config), &overrides)?;
        let out = pipeline::run(&cfg)?;
        let report = out.eval_report.unwrap();
        println!("{algorithm}: {:?} avg {:.3}", report.tasks, report.average);
    }

    let saved = load_map(dir.path().join("merged.safetensors"))?;
    println!("last merged checkpoint has {} tensors", saved.len());
    Ok(())
}
