//! Run configuration: documented defaults, overlaid by an optional JSON file,
//! then by `--set key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use camtrap_core::{ModelConfig, SynthSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetOptions {
    pub train_fraction: f64,
    /// Channel spread below which a frame counts as IR.
    pub gray_tolerance: u8,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            train_fraction: 0.6,
            gray_tolerance: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Predict all three frames of each test sequence instead of the first.
    pub per_frame: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VizOptions {
    pub sequence_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seeds of every section.
    pub seed: Option<u64>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub synth: SynthSpec,
    pub dataset: DatasetOptions,
    /// `num_classes` is taken from the manifest at training time.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub viz: VizOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            manifest: None,
            checkpoint: None,
            synth: SynthSpec::default(),
            dataset: DatasetOptions::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            viz: VizOptions::default(),
        }
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key, any
/// other value replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON when possible and
/// otherwise taken as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override `{assignment}` is not of the form key=value");
    };
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("override `{assignment}` has an empty key segment");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut patch = value;
    for part in key.rsplit('.') {
        let mut m = Map::new();
        m.insert(part.to_string(), patch);
        patch = Value::Object(m);
    }
    merge(root, patch);
    Ok(())
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> anyhow::Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let patch: Value =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut value, patch);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value).context("invalid configuration")?;
        if seed.is_some() {
            cfg.seed = seed;
        }
        if let Some(s) = cfg.seed {
            cfg.synth.seed = s;
            cfg.train.seed = s;
            cfg.model.seed = s;
        }
        Ok(cfg)
    }
}
