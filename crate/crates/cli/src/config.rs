//! Run configuration: one JSON document plus `--set key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use dwinkit_core::network::ModelConfig;
use dwinkit_core::synth::ObjectsPerClass;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// A validation failure. The binary reports it on one line prefixed with `config-error:`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub type ConfigResult<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> ConfigResult<T> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// `lr · (1 − step/total)^power`
    Poly { power: f64 },
    Constant,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Poly { power: 0.9 }
    }
}

impl Schedule {
    pub fn lr(&self, base: f64, step: u64, total: u64) -> f64 {
        match *self {
            Schedule::Poly { power } => {
                let frac = if total == 0 { 0.0 } else { step as f64 / total as f64 };
                base * (1.0 - frac).max(0.0).powf(power)
            }
            Schedule::Constant => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Global gradient-norm clip applied before the update; `null` disables it.
    pub grad_clip: Option<f64>,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.99,
            nesterov: true,
            weight_decay: 3e-5,
            grad_clip: Some(12.0),
            schedule: Schedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub objects_per_class: ObjectsPerClass,
    /// Axes on which training samples are randomly mirrored.
    pub augment_flip: [bool; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            seed: 0,
            n_train: 16,
            n_val: 4,
            shape: [32, 32, 32],
            num_classes: 3,
            objects_per_class: ObjectsPerClass::default(),
            augment_flip: [false; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub out_dir: PathBuf,
    /// Seeds parameter initialisation and batch sampling.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 2,
            eval_every: 250,
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub training: TrainingConfig,
    /// Evaluate batch elements one after another on the calling thread.
    pub strict_determinism: bool,
}

impl RunConfig {
    pub fn from_json(text: &str) -> ConfigResult<Self> {
        serde_json::from_str(text).map_err(|e| ConfigError(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> ConfigResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Applies `key=value` overrides, where `key` is a dotted path such as
    /// `training.steps` and `value` is JSON (bare words are taken as strings).
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> ConfigResult<Self> {
        let mut doc = serde_json::to_value(self).expect("config serialises");
        for set in sets {
            let set = set.as_ref();
            let Some((key, raw)) = set.split_once('=') else {
                return err(format!("override {set:?} is not key=value"));
            };
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut doc;
            for part in key.split('.') {
                node = match node {
                    Value::Object(map) => map.get_mut(part),
                    Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                    _ => None,
                }
                .ok_or_else(|| ConfigError(format!("unknown config key {key:?}")))?;
            }
            *node = value;
        }
        serde_json::from_value(doc).map_err(|e| ConfigError(format!("invalid override: {e}")))
    }

    /// Checks everything a command relies on before any work starts.
    pub fn validate(&self) -> ConfigResult<()> {
        self.model.validate().map_err(|e| ConfigError(e.to_string()))?;
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return err(format!("optimizer.lr must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return err(format!("optimizer.momentum must be in [0, 1), got {}", o.momentum));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return err(format!("optimizer.weight_decay must be non-negative, got {}", o.weight_decay));
        }
        if let Some(c) = o.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return err(format!("optimizer.grad_clip must be positive, got {c}"));
            }
        }
        if let Schedule::Poly { power } = o.schedule {
            if !(power.is_finite() && power >= 0.0) {
                return err(format!("optimizer.schedule.power must be non-negative, got {power}"));
            }
        }
        let d = &self.data;
        if d.shape != self.model.input_shape {
            return err(format!(
                "data.shape {:?} differs from model.input_shape {:?}",
                d.shape, self.model.input_shape
            ));
        }
        if d.num_classes != self.model.num_classes {
            return err(format!(
                "data.num_classes {} differs from model.num_classes {}",
                d.num_classes, self.model.num_classes
            ));
        }
        if self.model.in_channels != 1 {
            return err(format!("synthetic volumes have one channel, model.in_channels is {}", self.model.in_channels));
        }
        if d.shape.iter().any(|&e| e < dwinkit_core::synth::MIN_EXTENT) {
            return err(format!("data.shape {:?}: every extent must be at least 16", d.shape));
        }
        if d.objects_per_class.min > d.objects_per_class.max {
            return err("data.objects_per_class.min exceeds max");
        }
        let t = &self.training;
        if t.batch_size == 0 {
            return err("training.batch_size must be at least 1");
        }
        if t.steps > 0 && d.n_train == 0 {
            return err("training needs data.n_train >= 1");
        }
        if t.eval_every == 0 {
            return err("training.eval_every must be at least 1");
        }
        Ok(())
    }
}
