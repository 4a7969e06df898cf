//! Run configuration: a TOML document plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::TaskKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthgen::SynthConfig;
use crate::trainer::TrainConfig;

/// Task the cohort is expected to carry; `auto` accepts either.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpectedTask {
    #[default]
    Auto,
    Classification,
    Survival,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: ExpectedTask,
}

impl TaskConfig {
    pub fn check(&self, task: TaskKind) -> Result<()> {
        let ok = match (self.kind, task) {
            (ExpectedTask::Auto, _) => true,
            (ExpectedTask::Classification, TaskKind::Classification { .. }) => true,
            (ExpectedTask::Survival, TaskKind::Survival) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("cohort task {task:?} does not match task.kind = {:?}", self.kind)))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Cohort manifest, or a directory holding `manifest.json`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cohort: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_boot: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_boot: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Integrated-gradients path points.
    pub steps: usize,
    pub top_fraction: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            steps: crate::interpret::DEFAULT_STEPS,
            top_fraction: crate::interpret::TOP_FRACTION,
        }
    }
}

/// Everything a command needs. `seed` is the single seed of a run; it is
/// copied into `train.seed` and `synth.seed`, which cannot be set directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub task: TaskConfig,
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    pub explain: ExplainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            workers: 1,
            task: TaskConfig::default(),
            paths: PathsConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            eval: EvalConfig::default(),
            explain: ExplainConfig::default(),
        };
        cfg.propagate_seed();
        cfg
    }
}

const DERIVED_KEYS: [&str; 2] = ["train.seed", "synth.seed"];

impl RunConfig {
    /// Parses `text` (may be empty) and applies `overrides` in order.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        for key in DERIVED_KEYS {
            let (section, field) = key.split_once('.').expect("dotted");
            if table.get(section).and_then(|s| s.get(field)).is_some() {
                return Err(Error::Config(format!("`{key}` is derived; set the top-level `seed` instead")));
            }
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.propagate_seed();
    }

    fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::invalid("workers", "must be at least 1"));
        }
        if self.eval.n_boot == 0 {
            return Err(Error::invalid("eval.n_boot", "must be at least 1"));
        }
        if self.explain.steps == 0 {
            return Err(Error::invalid("explain.steps", "must be at least 1"));
        }
        if !(self.explain.top_fraction > 0.0 && self.explain.top_fraction <= 1.0) {
            return Err(Error::invalid("explain.top_fraction", "must be in (0, 1]"));
        }
        self.train.validate()
    }

    /// The effective configuration as TOML.
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("config serializes");
        for key in DERIVED_KEYS {
            let (section, field) = key.split_once('.').expect("dotted");
            if let Some(toml::Value::Table(t)) = table.get_mut(section) {
                t.remove(field);
            }
        }
        toml::to_string_pretty(&table).expect("config serializes")
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML value
/// when it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for part in parents {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{spec}`: `{part}` is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
