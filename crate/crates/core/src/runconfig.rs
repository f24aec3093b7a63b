//! Run configuration: model sections plus run-level keys, with overrides.
//!
//! A file holds `key = value` lines. Top-level model keys are defaults for
//! every `[section]`; each section defines one model. Without sections the
//! top level itself is the single model. Run-level keys (`dtype`, `out`,
//! `train.*`, `bench.*`, `shard.*`) are only accepted at top level.

use std::path::{Path, PathBuf};

use crate::config::{parse_num, parse_sections, Entry, ModelConfig, MODEL_KEYS};
use crate::error::{Error, Result};
use crate::grad::{LrSchedule, OptimizerKind, Task, TrainConfig};
use crate::kernel::DType;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchConfig {
    pub prompt_len: usize,
    pub batch: usize,
    pub n_new: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { prompt_len: 16, batch: 1, n_new: 16, repeats: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardConfig {
    pub workers: Vec<usize>,
    pub n_ids: usize,
}

impl Default for ShardConfig {
    fn default() -> Self {
        ShardConfig { workers: vec![1, 2, 4], n_ids: 50 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub models: Vec<ModelConfig>,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub shard: ShardConfig,
    pub dtype: DType,
    pub out: Option<PathBuf>,
}

/// Run-level keys, in documentation order.
pub const RUN_KEYS: &[&str] = &[
    "dtype",
    "out",
    "train.steps",
    "train.batch_size",
    "train.lr",
    "train.schedule",
    "train.warmup",
    "train.optimizer",
    "train.grad_clip",
    "train.task",
    "train.seq_len",
    "train.seed",
    "train.target_loss",
    "bench.prompt_len",
    "bench.batch",
    "bench.n_new",
    "bench.repeats",
    "shard.workers",
    "shard.n_ids",
];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            models: vec![ModelConfig::default()],
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            shard: ShardConfig::default(),
            dtype: DType::F64,
            out: None,
        }
    }
}

fn is_model_key(key: &str) -> bool {
    MODEL_KEYS.contains(&key)
}

impl RunConfig {
    /// Parses `text` and then applies `overrides` (`key`, `value`) in order.
    /// Model-key overrides apply to every model.
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let sections = parse_sections(text)?;
        let mut run = RunConfig { models: Vec::new(), ..RunConfig::default() };
        // Model-key overrides join every model's entries so a changed
        // variant also picks up that variant's default geometry.
        let model_overrides: Vec<Entry> = overrides
            .iter()
            .filter(|(k, _)| is_model_key(k))
            .map(|(k, v)| Entry { key: k.clone(), value: v.clone(), line: 0 })
            .collect();
        let mut defaults: Vec<&Entry> = Vec::new();
        let mut named = Vec::new();
        for s in &sections {
            match &s.name {
                None => {
                    for e in &s.entries {
                        if is_model_key(&e.key) {
                            defaults.push(e);
                        } else {
                            run.set(&e.key, &e.value)
                                .map_err(|err| Error::config(format!("line {}: {err}", e.line)))?;
                        }
                    }
                }
                Some(name) => named.push((name.clone(), &s.entries)),
            }
        }
        let build = |name: Option<&str>, entries: &[Entry]| -> Result<ModelConfig> {
            let all = defaults.iter().copied().chain(entries).chain(&model_overrides);
            for e in all.clone() {
                if !is_model_key(&e.key) {
                    let what = if RUN_KEYS.contains(&e.key.as_str()) { "run key only allowed at top level" } else { "unknown key" };
                    return Err(Error::config(format!("line {}: {what} '{}'", e.line, e.key)));
                }
            }
            let mut cfg = ModelConfig::from_entries(all)?;
            if let Some(n) = name.filter(|_| !model_overrides.iter().any(|e| e.key == "name")) {
                cfg.name = n.to_string();
            }
            Ok(cfg)
        };
        if named.is_empty() {
            run.models.push(build(None, &[])?);
        } else {
            for (name, entries) in named {
                run.models.push(build(Some(&name), entries)?);
            }
        }
        for (k, v) in overrides.iter().filter(|(k, _)| !is_model_key(k)) {
            run.set(k, v)?;
        }
        for m in &run.models {
            m.validate().map_err(|e| Error::config(format!("model '{}': {e}", m.name)))?;
        }
        run.train.validate()?;
        Ok(run)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text, overrides)
    }

    /// Defaults plus overrides, for runs without a config file.
    pub fn with_overrides(overrides: &[(String, String)]) -> Result<Self> {
        Self::from_text("", overrides)
    }

    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        if is_model_key(key) {
            for m in &mut self.models {
                m.set(key, value)?;
            }
            Ok(())
        } else {
            self.set(key, value)
        }
    }

    /// Sets a run-level key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "dtype" => {
                self.dtype = DType::parse(v).ok_or_else(|| Error::config(format!("unknown dtype '{v}' (f64|f32)")))?
            }
            "out" => self.out = Some(PathBuf::from(v)),
            "train.steps" => t.steps = parse_num(key, v)?,
            "train.batch_size" => t.batch_size = parse_num(key, v)?,
            "train.lr" => t.lr = parse_num(key, v)?,
            "train.schedule" => {
                let warmup = match t.schedule {
                    LrSchedule::Cosine { warmup, .. } => warmup,
                    LrSchedule::Constant => 0,
                };
                t.schedule = match LrSchedule::parse(v)? {
                    LrSchedule::Cosine { min_ratio, .. } => LrSchedule::Cosine { warmup, min_ratio },
                    s => s,
                };
            }
            "train.warmup" => {
                let w: usize = parse_num(key, v)?;
                t.schedule = match t.schedule {
                    LrSchedule::Cosine { min_ratio, .. } => LrSchedule::Cosine { warmup: w, min_ratio },
                    LrSchedule::Constant if w == 0 => LrSchedule::Constant,
                    LrSchedule::Constant => LrSchedule::Cosine { warmup: w, min_ratio: 0.1 },
                };
            }
            "train.optimizer" => t.optimizer = OptimizerKind::parse(v)?,
            "train.grad_clip" => t.grad_clip = parse_num(key, v)?,
            "train.task" => t.task = Task::parse(v)?,
            "train.seq_len" => t.seq_len = parse_num(key, v)?,
            "train.seed" => t.seed = parse_num(key, v)?,
            "train.target_loss" => {
                t.target_loss = if v == "none" { None } else { Some(parse_num(key, v)?) };
            }
            "bench.prompt_len" => self.bench.prompt_len = parse_num(key, v)?,
            "bench.batch" => self.bench.batch = parse_num(key, v)?,
            "bench.n_new" => self.bench.n_new = parse_num(key, v)?,
            "bench.repeats" => self.bench.repeats = parse_num(key, v)?,
            "shard.workers" => {
                self.shard.workers = v
                    .split(',')
                    .map(|w| parse_num(key, w))
                    .collect::<Result<Vec<usize>>>()?;
            }
            "shard.n_ids" => self.shard.n_ids = parse_num(key, v)?,
            _ => return Err(Error::config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// First model of the file.
    pub fn model(&self) -> &ModelConfig {
        &self.models[0]
    }
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{s}' is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
