//! Deterministic toy fixtures: a 16→32→4 MLP base, two expert checkpoints
//! with closed-form task deltas, and one labeled dataset per expert.
//!
//! Task `a` places its class means on input dims 0..4 and task `b` on dims
//! 8..12. Each expert adds a delta that routes its four input dims through
//! a `+x`/`-x` pair of hidden ReLUs (rows 0..8 for `a`, 8..16 for `b`) and
//! recombines the pair into the matching logit, so the expert's logit `c`
//! is roughly `GAIN * x[offset + c]`.
//!
//! All randomness comes from a ChaCha8 stream seeded with the given `u64`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_map;
use crate::error::Error;
use crate::eval::{evaluate, LabeledDataset};
use crate::io_util::write_atomic;
use crate::linalg::Matrix;
use crate::tensor::{DType, Tensor, TensorMap};

pub const INPUT_WIDTH: usize = 16;
pub const HIDDEN_WIDTH: usize = 32;
pub const N_CLASSES: usize = 4;
pub const SAMPLES_PER_TASK: usize = 512;
const BASE_STD: f64 = 0.05;
const GAIN: f64 = 4.0;
const CLASS_SEPARATION: f64 = 4.0;

/// Task names and the first input dim / hidden row each task uses.
pub const TASKS: [(&str, usize); 2] = [("task_a", 0), ("task_b", 8)];

pub struct Fixtures {
    pub base: TensorMap,
    /// `(task name, expert checkpoint)`
    pub experts: Vec<(String, TensorMap)>,
    pub datasets: Vec<(String, LabeledDataset)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestTask {
    pub expert: String,
    pub dataset: String,
    /// Accuracy of the task's expert on its own dataset.
    pub expert_accuracy: f64,
}

/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub base: String,
    pub config: String,
    pub tasks: std::collections::BTreeMap<String, ManifestTask>,
}

fn f32_tensor(shape: Vec<usize>, values: &[f64]) -> Tensor {
    Tensor::from_f64(DType::F32, shape, values).expect("shape matches values")
}

fn base_model(rng: &mut ChaCha8Rng) -> TensorMap {
    let normal = Normal::new(0.0, BASE_STD).expect("valid std");
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
    let mut m = TensorMap::new();
    m.insert("layers.0.weight", f32_tensor(vec![HIDDEN_WIDTH, INPUT_WIDTH], &draw(HIDDEN_WIDTH * INPUT_WIDTH)));
    m.insert("layers.0.bias", f32_tensor(vec![HIDDEN_WIDTH], &draw(HIDDEN_WIDTH)));
    m.insert("layers.1.weight", f32_tensor(vec![N_CLASSES, HIDDEN_WIDTH], &draw(N_CLASSES * HIDDEN_WIDTH)));
    m.insert("layers.1.bias", f32_tensor(vec![N_CLASSES], &draw(N_CLASSES)));
    m
}

fn expert(base: &TensorMap, offset: usize) -> TensorMap {
    let mut w0 = base.get("layers.0.weight").expect("base layout").to_f64_vec();
    let mut w1 = base.get("layers.1.weight").expect("base layout").to_f64_vec();
    for c in 0..N_CLASSES {
        let (up, down) = (offset + 2 * c, offset + 2 * c + 1);
        w0[up * INPUT_WIDTH + offset + c] += GAIN;
        w0[down * INPUT_WIDTH + offset + c] -= GAIN;
        w1[c * HIDDEN_WIDTH + up] += 1.0;
        w1[c * HIDDEN_WIDTH + down] -= 1.0;
    }
    let mut m = base.clone();
    m.insert("layers.0.weight", f32_tensor(vec![HIDDEN_WIDTH, INPUT_WIDTH], &w0));
    m.insert("layers.1.weight", f32_tensor(vec![N_CLASSES, HIDDEN_WIDTH], &w1));
    m
}

fn dataset(rng: &mut ChaCha8Rng, offset: usize) -> LabeledDataset {
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let mut features = Vec::with_capacity(SAMPLES_PER_TASK * INPUT_WIDTH);
    let mut labels = Vec::with_capacity(SAMPLES_PER_TASK);
    for i in 0..SAMPLES_PER_TASK {
        let label = i % N_CLASSES;
        for d in 0..INPUT_WIDTH {
            let mean = if d == offset + label { CLASS_SEPARATION } else { 0.0 };
            // stored as F32; round here so evaluation sees the saved values
            features.push((mean + normal.sample(rng)) as f32 as f64);
        }
        labels.push(label as i64);
    }
    LabeledDataset::new(Matrix::from_vec(SAMPLES_PER_TASK, INPUT_WIDTH, features), labels)
        .expect("consistent by construction")
}

/// Generates all fixtures in memory.
pub fn generate(seed: u64) -> Fixtures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = base_model(&mut rng);
    let mut experts = Vec::new();
    let mut datasets = Vec::new();
    for (name, offset) in TASKS {
        experts.push((name.to_string(), expert(&base, offset)));
        datasets.push((name.to_string(), dataset(&mut rng, offset)));
    }
    Fixtures { base, experts, datasets }
}

fn pipeline_yaml(seed: u64) -> String {
    let mut s = String::from("method:\n  algorithm: task_arithmetic\n  scaling: 0.3\nmodelpool:\n  base: base.safetensors\n  models:\n");
    for (name, _) in TASKS {
        s += &format!("    - name: {name}\n      path: expert_{name}.safetensors\n");
    }
    s += "taskpool:\n";
    for (name, _) in TASKS {
        s += &format!("  - name: {name}\n    path: data_{name}.safetensors\n");
    }
    s += &format!("merged_model_save_path: merged.safetensors\nreport_save_path: report.json\nseed: {seed}\n");
    s
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the fixtures, a ready-to-run `pipeline.yaml` and `manifest.json`
/// into `outdir`. Same seed, same bytes.
pub fn synth_fixtures(seed: u64, outdir: impl AsRef<Path>) -> Result<Manifest, Error> {
    let outdir = outdir.as_ref();
    let fx = generate(seed);
    save_map(&fx.base, outdir.join("base.safetensors"))?;
    let mut tasks = std::collections::BTreeMap::new();
    for ((name, model), (_, data)) in fx.experts.iter().zip(&fx.datasets) {
        let expert = format!("expert_{name}.safetensors");
        let dataset = format!("data_{name}.safetensors");
        save_map(model, outdir.join(&expert))?;
        data.save(outdir.join(&dataset))?;
        let report = evaluate(model, &[(name.clone(), data.clone())])?;
        tasks.insert(
            name.clone(),
            ManifestTask {
                expert,
                dataset,
                expert_accuracy: report.average,
            },
        );
    }
    let config: PathBuf = outdir.join("pipeline.yaml");
    write_atomic(&config, pipeline_yaml(seed).as_bytes()).map_err(io_error(&config))?;
    let manifest = Manifest {
        seed,
        base: "base.safetensors".into(),
        config: "pipeline.yaml".into(),
        tasks,
    };
    let path = outdir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_atomic(&path, json.as_bytes()).map_err(io_error(&path))?;
    Ok(manifest)
}
