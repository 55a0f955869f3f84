//! The end-to-end run: build the pool, validate, merge, save, evaluate,
//! save the report.
//!
//! Nothing is written unless the merge succeeds, and every file is written
//! to a temporary sibling first and renamed into place. If evaluation fails
//! after the checkpoint was saved, the checkpoint is kept and
//! [`Error::EvalAfterMerge`] is returned.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::checkpoint::save_map;
use crate::config::RunConfig;
use crate::error::Error;
use crate::eval::{evaluate, EvalReport, LabeledDataset};
use crate::io_util::write_atomic;
use crate::merge::{FusionAlgorithm, MaskSet, MergeReport};
use crate::pool::{ModelPool, ValidationReport};
use crate::tensor::TensorMap;

#[derive(Debug)]
pub struct PipelineOutput {
    pub merged: TensorMap,
    pub masks: Option<MaskSet>,
    pub validation: ValidationReport,
    pub merge_report: MergeReport,
    pub eval_report: Option<EvalReport>,
}

/// Loads every task of the config's task pool.
pub fn load_tasks(cfg: &RunConfig) -> Result<Vec<(String, LabeledDataset)>, Error> {
    cfg.tasks()
        .into_iter()
        .map(|(name, path)| Ok((name, LabeledDataset::load(&path)?)))
        .collect()
}

/// Validates the pool, turning a failed report into an error.
pub fn validate(pool: &ModelPool) -> Result<ValidationReport, Error> {
    let report = pool.validate()?;
    if !report.is_mergeable() {
        return Err(crate::pool::PoolError::NotMergeable(report).into());
    }
    Ok(report)
}

/// Runs the configured merge method.
pub fn run(cfg: &RunConfig) -> Result<PipelineOutput, Error> {
    run_with(cfg, &cfg.method)
}

/// Runs `algorithm` on the config's pool; the config's method section only
/// feeds the report.
pub fn run_with(cfg: &RunConfig, algorithm: &dyn FusionAlgorithm) -> Result<PipelineOutput, Error> {
    let pool = cfg.model_pool()?;
    let validation = validate(&pool)?;
    let tasks = load_tasks(cfg)?;
    let outcome = algorithm.run(&pool)?;

    let _locks: Vec<OutputLock> = [cfg.merged_model_path(), cfg.report_path()]
        .into_iter()
        .flatten()
        .map(|p| OutputLock::acquire(&p))
        .collect();

    let saved = cfg.merged_model_path();
    if let Some(p) = &saved {
        save_map(&outcome.merged, p)?;
        log::info!("saved merged model to {}", p.display());
    }
    if let (Some(dir), Some(masks)) = (cfg.mask_path(), &outcome.masks) {
        for (name, m) in masks {
            save_map(m, dir.join(format!("{name}.safetensors")))?;
        }
    }

    let mut eval_report = None;
    if !tasks.is_empty() {
        let mut report = match evaluate(&outcome.merged, &tasks) {
            Ok(r) => r,
            Err(source) => {
                return Err(match saved {
                    Some(saved) => Error::EvalAfterMerge { saved, source },
                    None => source.into(),
                })
            }
        };
        report.algorithm = Some(outcome.report.algorithm.clone());
        report.spec = spec_value(&outcome.report);
        if let Some(p) = cfg.report_path() {
            write_report(&report, &p)?;
            log::info!("saved report to {}", p.display());
        }
        eval_report = Some(report);
    }

    Ok(PipelineOutput {
        merged: outcome.merged,
        masks: outcome.masks,
        validation,
        merge_report: outcome.report,
        eval_report,
    })
}

fn spec_value(r: &MergeReport) -> Value {
    json!({
        "algorithm": r.algorithm,
        "parameters": r.parameters,
        "models": r.models,
    })
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<(), Error> {
    write_atomic(path, report.to_json().as_bytes()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Advisory marker against two runs writing the same output; a held lock
/// only produces a warning.
struct OutputLock(Option<PathBuf>);

impl OutputLock {
    fn acquire(target: &Path) -> Self {
        let mut name = target.file_name().unwrap_or_default().to_os_string();
        name.push(".lock");
        let lock = target.with_file_name(name);
        if let Some(dir) = lock.parent().filter(|d| !d.as_os_str().is_empty()) {
            let _ = std::fs::create_dir_all(dir);
        }
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => OutputLock(Some(lock)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                log::warn!("{} exists; another run may be writing {}", lock.display(), target.display());
                OutputLock(None)
            }
            Err(_) => OutputLock(None),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        if let Some(p) = &self.0 {
            let _ = std::fs::remove_file(p);
        }
    }
}
