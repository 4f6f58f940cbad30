//! Run configuration: built-in presets, an optional config file (JSON or
//! `key=value` lines), and command-line overrides, merged in that order.

use std::path::Path;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use ctrnn_lab::data::Task;
use ctrnn_lab::solver::{Method, SolverSpec};
use ctrnn_lab::train::TrainConfig;

use crate::error::{CliError, CliResult};

/// Offset between the train and test generator seeds of a synthetic task.
pub const TEST_SEED_OFFSET: u64 = 1_000_003;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Length-16 XOR, hidden 32, 200 epochs, 3 replicas.
    Desk,
    /// Length-32 XOR, hidden 64, 500 epochs (200 on seqMNIST), 5 replicas.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: Task,
    /// Bits per XOR sequence.
    pub bits: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// Seed of the train-split generator; the test split uses
    /// `data_seed + TEST_SEED_OFFSET`.
    pub data_seed: u64,
    pub val_fraction: f64,
    pub replicas: usize,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::XorDense,
            bits: 32,
            train_count: 100_000,
            test_count: 10_000,
            data_seed: 0,
            val_fraction: 0.1,
            replicas: 5,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        if self.bits == 0 {
            return Err(CliError::usage("bits must be at least 1"));
        }
        if self.train_count < 2 || self.test_count < 1 {
            return Err(CliError::usage("train_count must be >= 2 and test_count >= 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(CliError::usage("val_fraction must lie in (0, 1)"));
        }
        if self.replicas == 0 {
            return Err(CliError::usage("replicas must be at least 1"));
        }
        Ok(())
    }

    /// Number of classes of the configured task.
    pub fn classes(&self) -> usize {
        self.task.classes()
    }
}

/// Preset values for `task`, as a partial config.
pub fn preset_values(preset: Preset, task: Task) -> Map<String, Value> {
    let mnist = task == Task::SeqmnistEvent;
    let v = match (preset, mnist) {
        (Preset::Paper, false) => serde_json::json!({
            "bits": 32, "hidden_dim": 64, "epochs": 500, "batch_size": 256,
            "learning_rate": 5e-3, "train_count": 100000, "test_count": 10000, "replicas": 5,
        }),
        (Preset::Paper, true) => serde_json::json!({
            "hidden_dim": 64, "epochs": TrainConfig::REAL_DATA_EPOCHS, "batch_size": 256,
            "learning_rate": 5e-3, "train_count": 60000, "test_count": 10000, "replicas": 5,
        }),
        (Preset::Desk, false) => serde_json::json!({
            "bits": 16, "hidden_dim": 32, "epochs": 200, "batch_size": DESK_XOR_BATCH,
            "learning_rate": DESK_XOR_LR, "train_count": DESK_XOR_TRAIN, "test_count": DESK_XOR_TEST,
            "replicas": 3,
        }),
        (Preset::Desk, true) => serde_json::json!({
            "hidden_dim": 32, "epochs": 20, "batch_size": 32, "learning_rate": 5e-3,
            "train_count": 2000, "test_count": 1000, "replicas": 1,
        }),
    };
    match v {
        Value::Object(m) => m,
        _ => unreachable!("preset literals are objects"),
    }
}

pub const DESK_XOR_TRAIN: usize = 8_000;
pub const DESK_XOR_TEST: usize = 2_000;
pub const DESK_XOR_BATCH: usize = 32;
pub const DESK_XOR_LR: f64 = 2e-3;

/// Parses a config file. A file whose first non-blank character is `{` is
/// read as a JSON object; anything else as `key=value` lines, where `#`
/// starts a comment.
pub fn parse_config_text(text: &str) -> CliResult<Map<String, Value>> {
    if text.trim_start().starts_with('{') {
        return match serde_json::from_str(text) {
            Ok(Value::Object(m)) => Ok(m),
            Ok(_) => Err(CliError::usage("config JSON must be an object")),
            Err(e) => Err(CliError::usage(format!("config JSON: {e}"))),
        };
    }
    let mut out = Map::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = parse_assignment(line).map_err(|e| CliError::usage(format!("line {}: {e}", n + 1)))?;
        out.insert(k, v);
    }
    Ok(out)
}

pub fn load_config_file(path: &Path) -> CliResult<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|source| ctrnn_lab::Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_text(&text)
}

/// Splits `key=value`. The value is read as JSON when it parses, otherwise
/// kept as a string, so `epochs=20`, `arch=odelstm` and `clip_norm=null`
/// all work.
pub fn parse_assignment(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(format!("empty key in {s:?}"));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

/// Accepts `"rk4:4"` style shorthand for the solver.
fn normalize(mut m: Map<String, Value>) -> CliResult<Map<String, Value>> {
    if let Some(Value::String(s)) = m.get("solver") {
        let (method, n) = s.split_once(':').unwrap_or((s.as_str(), "1"));
        let method: Method = method.parse()?;
        let n: usize = n
            .parse()
            .map_err(|_| CliError::usage(format!("bad solver substeps in {s:?}")))?;
        let spec = SolverSpec::new(method, n)?;
        m.insert(
            "solver".into(),
            serde_json::to_value(spec).map_err(ctrnn_lab::Error::from)?,
        );
    }
    Ok(m)
}

/// Merges `preset`, then `user` over the defaults, rejecting unknown keys.
pub fn resolve(preset: Preset, user: Map<String, Value>) -> CliResult<RunConfig> {
    let user = normalize(user)?;
    let Value::Object(mut base) = serde_json::to_value(RunConfig::default()).map_err(ctrnn_lab::Error::from)? else {
        unreachable!("RunConfig serializes to an object");
    };
    let unknown: Vec<&String> = user.keys().filter(|k| !base.contains_key(*k)).collect();
    if !unknown.is_empty() {
        return Err(CliError::usage(format!("unknown config key(s): {unknown:?}")));
    }
    let task = match user.get("task") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::usage(format!("task: {e}")))?,
        None => Task::XorDense,
    };
    base.extend(preset_values(preset, task));
    base.extend(user);
    let cfg: RunConfig =
        serde_json::from_value(Value::Object(base)).map_err(|e| CliError::usage(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
