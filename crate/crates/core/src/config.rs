//! Run configuration: one YAML file plus `dotted.path=value` overrides.
//!
//! ```yaml
//! method:
//!   algorithm: task_arithmetic
//!   scaling: 0.3
//! modelpool:
//!   base: base.safetensors
//!   models:
//!     - { name: task_a, path: expert_a.safetensors }
//!     - { name: task_b, path: expert_b.safetensors }
//! taskpool:
//!   - { name: task_a, path: task_a.safetensors }
//! merged_model_save_path: merged.safetensors
//! report_save_path: report.json
//! ```
//!
//! Relative paths resolve against the directory of the config file.
//! Anchors, aliases and merge keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};
use thiserror::Error;

use crate::merge::{MergeError, MergeSpec};
use crate::pool::{KeyFilter, ModelPool, ModelSource, PoolError};

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("unknown field `{field}`{}", at(path))]
    UnknownField { path: String, field: String },
    #[error("missing field `{field}`{}", at(path))]
    MissingField { path: String, field: String },
    #[error("type error{}: expected {expected}, found {found}", at(path))]
    TypeError { path: String, expected: String, found: String },
    #[error("invalid value{}: {message}", at(path))]
    InvalidValue { path: String, message: String },
    #[error("invalid override `{0}`: {1}")]
    InvalidOverride(String, String),
    #[error("invalid method: {0}")]
    Method(#[from] MergeError),
    #[error("{0}")]
    Invalid(String),
}

fn at(path: &str) -> String {
    if path.is_empty() || path == "." {
        String::new()
    } else {
        format!(" at `{path}`")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPoolConfig {
    #[serde(default)]
    pub base: Option<PathBuf>,
    pub models: Vec<ModelEntry>,
    /// Per-model statistics checkpoints (Fisher diagonals or Gram matrices).
    #[serde(default)]
    pub stats: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub key_filter: KeyFilter,
    /// Model supplying the keys the filter excludes; defaults to the base.
    #[serde(default)]
    pub carrier: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: MergeSpec,
    pub modelpool: ModelPoolConfig,
    #[serde(default)]
    pub taskpool: Option<Vec<TaskEntry>>,
    #[serde(default)]
    pub merged_model_save_path: Option<PathBuf>,
    #[serde(default)]
    pub report_save_path: Option<PathBuf>,
    /// Directory receiving one mask checkpoint per model (TALL masks).
    #[serde(default)]
    pub mask_save_path: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Reads `path`, applies `overrides` in order and validates the result.
pub fn load_config<S: AsRef<str>>(path: impl AsRef<Path>, overrides: &[S]) -> Result<RunConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let dir = path.parent().unwrap_or(Path::new(""));
    RunConfig::parse(&text, dir, overrides)
}

impl RunConfig {
    /// Parses YAML text; relative paths resolve against `base_dir`.
    pub fn parse<S: AsRef<str>>(text: &str, base_dir: impl AsRef<Path>, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut doc = parse_yaml(text)?;
        for o in overrides {
            apply_override(&mut doc, o.as_ref())?;
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(classify)?;
        cfg.base_dir = base_dir.as_ref().to_path_buf();
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), ConfigError> {
        self.method.resolve()?;
        if self.modelpool.models.is_empty() {
            return Err(ConfigError::InvalidValue {
                path: "modelpool.models".into(),
                message: "at least one model is required".into(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, m) in self.modelpool.models.iter().enumerate() {
            if m.name.is_empty() || !seen.insert(m.name.as_str()) {
                return Err(ConfigError::InvalidValue {
                    path: format!("modelpool.models.{i}.name"),
                    message: format!("model name `{}` is empty or repeated", m.name),
                });
            }
        }
        if let Some(tasks) = &self.taskpool {
            let mut seen = std::collections::BTreeSet::new();
            for (i, t) in tasks.iter().enumerate() {
                if !seen.insert(t.name.as_str()) {
                    return Err(ConfigError::InvalidValue {
                        path: format!("taskpool.{i}.name"),
                        message: format!("task name `{}` is repeated", t.name),
                    });
                }
            }
        }
        if let Some(name) = self.modelpool.stats.keys().find(|n| !seen.contains(n.as_str())) {
            return Err(ConfigError::InvalidValue {
                path: format!("modelpool.stats.{name}"),
                message: "no model with this name".into(),
            });
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Builds the model pool with every path resolved.
    pub fn model_pool(&self) -> Result<ModelPool, PoolError> {
        let mp = &self.modelpool;
        let mut pool = ModelPool::new().with_key_filter(mp.key_filter.clone());
        if let Some(b) = &mp.base {
            pool = pool.with_base(ModelSource::file(self.resolve(b)));
        }
        for m in &mp.models {
            pool.add_model(m.name.clone(), ModelSource::file(self.resolve(&m.path)))?;
        }
        for (name, p) in &mp.stats {
            pool = pool.with_stats(name.clone(), ModelSource::file(self.resolve(p)));
        }
        if let Some(c) = &mp.carrier {
            pool = pool.with_carrier(c.clone());
        }
        Ok(pool)
    }

    pub fn tasks(&self) -> Vec<(String, PathBuf)> {
        self.taskpool
            .iter()
            .flatten()
            .map(|t| (t.name.clone(), self.resolve(&t.path)))
            .collect()
    }

    pub fn merged_model_path(&self) -> Option<PathBuf> {
        self.merged_model_save_path.as_deref().map(|p| self.resolve(p))
    }

    pub fn report_path(&self) -> Option<PathBuf> {
        self.report_save_path.as_deref().map(|p| self.resolve(p))
    }

    pub fn mask_path(&self) -> Option<PathBuf> {
        self.mask_save_path.as_deref().map(|p| self.resolve(p))
    }
}

fn parse_yaml(text: &str) -> Result<Value, ConfigError> {
    reject_anchors(text)?;
    let doc: Value = serde_yaml::from_str(text).map_err(|e| {
        let (line, column) = e.location().map(|l| (l.line(), l.column())).unwrap_or((0, 0));
        ConfigError::Parse {
            line,
            column,
            message: e.to_string(),
        }
    })?;
    if let Value::Mapping(m) = &doc {
        if m.contains_key("<<") {
            return Err(ConfigError::Parse {
                line: 1,
                column: 1,
                message: "merge keys are not supported".into(),
            });
        }
    }
    Ok(doc)
}

/// Finds `&anchor` and `*alias` tokens outside quotes and comments.
fn reject_anchors(text: &str) -> Result<(), ConfigError> {
    for (ln, line) in text.lines().enumerate() {
        let mut quote: Option<char> = None;
        let mut prev = ' ';
        let chars: Vec<char> = line.chars().collect();
        for (col, &c) in chars.iter().enumerate() {
            match quote {
                Some(q) if c == q => quote = None,
                Some(_) => {}
                None => {
                    if c == '#' && prev.is_whitespace() {
                        break;
                    }
                    let token_start = prev.is_whitespace() || matches!(prev, '[' | '{' | ',');
                    if token_start && (c == '"' || c == '\'') {
                        quote = Some(c);
                    } else if token_start
                        && (c == '&' || c == '*')
                        && chars.get(col + 1).is_some_and(|n| !n.is_whitespace())
                    {
                        return Err(ConfigError::Parse {
                            line: ln + 1,
                            column: col + 1,
                            message: "anchors and aliases are not supported (quote values starting with `*` or `&`)"
                                .into(),
                        });
                    }
                }
            }
            prev = c;
        }
    }
    Ok(())
}

/// Applies `a.b.c=value`. The value is read as a YAML scalar; numeric path
/// segments index sequences.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let bad = |msg: &str| ConfigError::InvalidOverride(spec.to_string(), msg.to_string());
    let (path, raw) = spec.split_once('=').ok_or_else(|| bad("expected KEY=VALUE"))?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(bad("empty path segment"));
    }
    let value = match serde_yaml::from_str::<Value>(raw) {
        Ok(v @ (Value::Null | Value::Bool(_) | Value::Number(_) | Value::String(_) | Value::Sequence(_))) => v,
        _ => Value::String(raw.to_string()),
    };
    let mut cur = doc;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        if cur.is_null() {
            *cur = Value::Mapping(Mapping::new());
        }
        cur = match cur {
            Value::Mapping(m) => {
                let key = Value::String(seg.to_string());
                if last {
                    m.insert(key, value);
                    return Ok(());
                }
                m.entry(key).or_insert(Value::Null)
            }
            Value::Sequence(s) => {
                let idx: usize = seg.parse().map_err(|_| bad("sequence index must be a number"))?;
                if idx > s.len() {
                    return Err(bad("sequence index out of range"));
                }
                if idx == s.len() {
                    s.push(Value::Null);
                }
                if last {
                    s[idx] = value;
                    return Ok(());
                }
                &mut s[idx]
            }
            _ => return Err(bad("path goes through a scalar")),
        };
    }
    unreachable!("the loop returns on the last segment")
}

fn between_backticks(s: &str) -> Option<String> {
    let start = s.find('`')? + 1;
    let len = s[start..].find('`')?;
    Some(s[start..start + len].to_string())
}

fn classify(e: serde_path_to_error::Error<serde_yaml::Error>) -> ConfigError {
    let path = e.path().to_string();
    let msg = e.inner().to_string();
    if let Some(rest) = msg.strip_prefix("unknown field ") {
        return ConfigError::UnknownField {
            path,
            field: between_backticks(rest).unwrap_or_else(|| rest.to_string()),
        };
    }
    if let Some(rest) = msg.strip_prefix("missing field ") {
        return ConfigError::MissingField {
            path,
            field: between_backticks(rest).unwrap_or_else(|| rest.to_string()),
        };
    }
    if let Some(rest) = msg.strip_prefix("invalid type: ") {
        if let Some((found, expected)) = rest.split_once(", expected ") {
            return ConfigError::TypeError {
                path,
                expected: expected.to_string(),
                found: found.to_string(),
            };
        }
    }
    ConfigError::InvalidValue { path, message: msg }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = serde_yaml::to_string(self).map_err(|_| fmt::Error)?;
        f.write_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
method:
  algorithm: simple_average
modelpool:
  models:
    - name: a
      path: a.safetensors
    - name: b
      path: /abs/b.safetensors
";

    fn parse(text: &str, overrides: &[&str]) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(text, "/cfg", overrides)
    }

    #[test]
    fn minimal_config() {
        let cfg = parse(MINIMAL, &[]).unwrap();
        assert_eq!(cfg.method.algorithm, "simple_average");
        assert_eq!(cfg.modelpool.models.len(), 2);
        assert_eq!(cfg.seed, 0);
        assert!(cfg.taskpool.is_none());
        assert_eq!(cfg.resolve(&cfg.modelpool.models[0].path), PathBuf::from("/cfg/a.safetensors"));
        assert_eq!(cfg.resolve(&cfg.modelpool.models[1].path), PathBuf::from("/abs/b.safetensors"));
    }

    #[test]
    fn overrides_win() {
        let text = MINIMAL.replace("simple_average", "task_arithmetic\n  scaling: 0.5") + "  base: base.safetensors\n";
        let cfg = parse(&text, &[]).unwrap();
        assert_eq!(cfg.method.scaling, Some(0.5));
        let cfg = parse(&text, &["method.scaling=0.7"]).unwrap();
        assert_eq!(cfg.method.scaling, Some(0.7));
        let cfg = parse(&text, &["method.scaling=0.7", "method.scaling=0.1"]).unwrap();
        assert_eq!(cfg.method.scaling, Some(0.1));
        let cfg = parse(&text, &["modelpool.models.1.name=z", "seed=9"]).unwrap();
        assert_eq!(cfg.modelpool.models[1].name, "z");
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_fields_are_named() {
        let err = parse(&format!("{MINIMAL}foo: 1\n"), &[]).unwrap_err();
        assert!(matches!(&err, ConfigError::UnknownField { field, .. } if field == "foo"), "{err}");
        let err = parse(MINIMAL, &["method.lambda=1"]).unwrap_err();
        assert!(
            matches!(&err, ConfigError::UnknownField { field, path } if field == "lambda" && path == "method.lambda"),
            "{err}"
        );
    }

    #[test]
    fn type_errors_report_expected_and_found() {
        let err = parse(MINIMAL, &["seed=abc"]).unwrap_err();
        match err {
            ConfigError::TypeError { path, expected, found } => {
                assert_eq!(path, "seed");
                assert!(expected.contains("u64"), "{expected}");
                assert!(found.contains("abc"), "{found}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn parse_errors_carry_location() {
        let err = parse("method:\n  algorithm: [unclosed\n", &[]).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line, .. } if line >= 2), "{err}");
    }

    #[test]
    fn anchors_are_rejected() {
        let text = "defaults: &d\n  algorithm: simple_average\nmethod: *d\n";
        assert!(matches!(parse(text, &[]), Err(ConfigError::Parse { line: 1, .. })));
        let quoted = MINIMAL.to_string() + "  key_filter:\n    exclude: [\"*.head\", 'a&b']\n";
        let cfg = parse(&quoted, &[]).unwrap();
        assert_eq!(cfg.modelpool.key_filter.exclude, vec!["*.head", "a&b"]);
    }

    #[test]
    fn semantic_checks() {
        let empty = "method:\n  algorithm: simple_average\nmodelpool:\n  models: []\n";
        assert!(matches!(parse(empty, &[]), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(parse(MINIMAL, &["method.algorithm=nope"]), Err(ConfigError::Method(_))));
        assert!(matches!(parse(MINIMAL, &["method.scaling=0.3"]), Err(ConfigError::Method(_))));
        assert!(matches!(parse(MINIMAL, &["modelpool.models.1.name=a"]), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(
            parse(MINIMAL, &["modelpool.stats.zz=s.safetensors"]),
            Err(ConfigError::InvalidValue { .. })
        ));
        let missing = "modelpool:\n  models: []\n";
        assert!(matches!(parse(missing, &[]), Err(ConfigError::MissingField { field, .. }) if field == "method"));
    }

    #[test]
    fn override_syntax_errors() {
        let mut v = Value::Null;
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "a..b=1").is_err());
        apply_override(&mut v, "a=1").unwrap();
        assert!(apply_override(&mut v, "a.b=1").is_err());
        apply_override(&mut v, "list=[1, 2]").unwrap();
        assert!(apply_override(&mut v, "list.x=3").is_err());
        assert!(apply_override(&mut v, "list.5=3").is_err());
        apply_override(&mut v, "list.2=3").unwrap();
        assert_eq!(v["list"], serde_yaml::from_str::<Value>("[1, 2, 3]").unwrap());
    }

    #[test]
    fn builds_pool_with_resolved_paths() {
        let text = MINIMAL.to_string() + "  base: base.safetensors\n  carrier: a\n";
        let pool = parse(&text, &[]).unwrap().model_pool().unwrap();
        assert_eq!(pool.model_names(), vec!["a", "b"]);
        assert!(pool.has_base());
        assert_eq!(pool.carrier_name().unwrap(), "a");
    }
}
