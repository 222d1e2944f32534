//! Experiment configuration files and `key.path=value` overrides.

use std::path::Path;

use hst_core::{HstModelConfig, SarConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::TaskSpec;
use crate::error::{HarnessError, Result};
use crate::optim::{AdamConfig, Decay, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub batch_size: usize,
    /// Optimizer steps before any SAR doubling.
    pub steps: usize,
    pub warmup: usize,
    pub decay: Decay,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Evaluate on the dev split every this many steps (and at the end).
    pub eval_every: usize,
    /// With SAR on: halve the per-step batch and double the step count.
    pub double_steps: bool,
    pub save_checkpoint: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            steps: 1000,
            warmup: 100,
            decay: Decay::RootSquare,
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: 200,
            double_steps: true,
            save_checkpoint: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(HarnessError::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(HarnessError::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }

    /// `(per-step batch, total steps)` after the halve-and-copy rule.
    pub fn effective_plan(&self, sar: &SarConfig) -> (usize, usize) {
        if sar.enabled && self.double_steps {
            ((self.batch_size / 2).max(1), self.steps * 2)
        } else {
            (self.batch_size, self.steps)
        }
    }

    pub fn schedule(&self, sar: &SarConfig) -> Schedule {
        let (_, total) = self.effective_plan(sar);
        let scale = total / self.steps.max(1);
        Schedule {
            peak: self.lr,
            warmup: self.warmup * scale.max(1),
            total,
            decay: self.decay,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: HstModelConfig,
    pub train: TrainConfig,
    pub sar: SarConfig,
    pub task: TaskSpec,
}

impl ExperimentConfig {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            Ok(toml::from_str(&text)?)
        }
    }

    /// Applies `section.field=value` overrides. Values parse as JSON and
    /// fall back to plain strings (`model.pooling=MAX`).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        Ok(serde_json::from_value(doc)?)
    }

    /// Copies task-derived sizes (sequence length, vocabulary, classes)
    /// into the model config.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model.n_base = c.model.g + c.task.length;
        c.model.vocab_size = c.task.vocab_size();
        c.model.num_classes = c.task.num_classes();
        c
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| HarnessError::Config(format!("override {key}: {part} is not a section")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(HarnessError::Config(format!("unknown config key {key}")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| HarnessError::Config(format!("unknown config key {key}")))?;
    }
    unreachable!("split yields at least one part")
}
