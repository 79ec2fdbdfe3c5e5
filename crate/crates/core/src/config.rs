//! Run configuration in a flat `section.key = value` text format.
//!
//! ```text
//! # comments and blank lines are ignored
//! world.frames = 24
//! training.lr = 0.0003
//! eval.aggregation = per_track
//! ```
//!
//! Values are JSON scalars; bare words are read as strings. Keys not
//! present keep their current value, unknown keys are rejected.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::metrics::Aggregation;
use crate::perturb::PerturbationConfig;
use crate::rng::{derive_seed, STREAM_EVAL, STREAM_TRAIN_STEP, STREAM_VIDEO};
use crate::select::SelectionConfig;
use crate::train::{DatasetSpec, TrainingConfig};
use crate::transformer::ModelConfig;
use crate::world::WorldConfig;

/// Training video set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub videos: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { videos: 16, seed: 1 }
    }
}

/// Held-out evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub videos: usize,
    pub tracks: usize,
    pub candidates: usize,
    pub seed: u64,
    pub aggregation: Aggregation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            videos: 20,
            tracks: 200,
            candidates: 6,
            seed: 999,
            aggregation: Aggregation::PerTrack,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.videos == 0 || self.tracks == 0 {
            return Err(Error::invalid("eval.videos/tracks", "must be positive"));
        }
        if self.candidates == 0 || self.candidates > crate::perturb::MAX_CANDIDATES {
            return Err(Error::invalid("eval.candidates", format!("must lie in 1..={}", crate::perturb::MAX_CANDIDATES)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub data: DataConfig,
    pub perturbation: PerturbationConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub selection: SelectionConfig,
    pub eval: EvalConfig,
}

const SECTIONS: [&str; 7] = ["world", "data", "perturbation", "model", "training", "selection", "eval"];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset().validate()?;
        self.model.validate()?;
        self.training.validate()?;
        self.selection.validate()?;
        self.eval.validate()
    }

    /// Derives every seed of the run from one master seed.
    pub fn reseed(&mut self, master: u64) {
        self.data.seed = derive_seed(master, &[STREAM_VIDEO]);
        self.training.seed = derive_seed(master, &[STREAM_TRAIN_STEP]);
        self.eval.seed = derive_seed(master, &[STREAM_EVAL]);
    }

    pub fn dataset(&self) -> DatasetSpec {
        DatasetSpec {
            world: self.world.clone(),
            videos: self.data.videos,
            seed: self.data.seed,
            perturbation: self.perturbation.clone(),
        }
    }

    pub fn eval_dataset(&self) -> DatasetSpec {
        DatasetSpec {
            videos: self.eval.videos,
            seed: self.eval.seed,
            ..self.dataset()
        }
    }

    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(text)?;
        Ok(c)
    }

    /// Overrides the keys present in `text`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| Error::invalid("config", format!("line {}: {msg}", n + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| at(format!("expected `section.key = value`, got {line:?}")))?;
            self::set(&mut tree, key.trim(), value.trim()).map_err(|e| at(e.to_string()))?;
        }
        let parsed: RunConfig = serde_json::from_value(tree).map_err(|e| Error::invalid("config", e.to_string()))?;
        parsed.validate()?;
        *self = parsed;
        Ok(())
    }

    /// Applies one `section.key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        self::set(&mut tree, key, value)?;
        let parsed: RunConfig = serde_json::from_value(tree).map_err(|e| Error::invalid(key, e.to_string()))?;
        *self = parsed;
        Ok(())
    }

    /// Renders every key; `parse(to_text())` returns an equal config.
    pub fn to_text(&self) -> Result<String> {
        let tree = serde_json::to_value(self)?;
        let mut out = String::new();
        for s in SECTIONS {
            if let Some(Value::Object(map)) = tree.get(s) {
                for (k, v) in map {
                    out.push_str(&format!("{s}.{k} = {v}\n"));
                }
            }
        }
        Ok(out)
    }
}

fn set(tree: &mut Value, key: &str, value: &str) -> Result<()> {
    let (section, field) = key
        .split_once('.')
        .ok_or_else(|| Error::invalid("config", format!("key {key:?} must be `section.key`")))?;
    let map: &mut Map<String, Value> = tree
        .get_mut(section)
        .and_then(Value::as_object_mut)
        .ok_or_else(|| Error::invalid("config", format!("unknown section {section:?}")))?;
    let slot = map.get_mut(field).ok_or_else(|| Error::invalid("config", format!("unknown key {key:?}")))?;
    *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok(())
}
