//! Run configuration: one TOML file, every experimental knob a named field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::ProcessorMix;
use crate::engine::MethodKind;
use crate::models::{LocalMode, LrSchedule, ModelSpec, TrainConfig};
use crate::synthdata::DatasetSpec;
use crate::{MmflError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKindConfig {
    Softmax,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub kind: ModelKindConfig,
    /// Hidden widths for `mlp`.
    pub hidden: Vec<usize>,
    pub data: DatasetSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            name: "model".into(),
            kind: ModelKindConfig::Softmax,
            hidden: Vec::new(),
            data: DatasetSpec::default(),
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> ModelSpec {
        match self.kind {
            ModelKindConfig::Softmax => ModelSpec::softmax_linear(self.data.feature_dim, self.data.num_labels),
            ModelKindConfig::Mlp => ModelSpec::mlp(self.data.feature_dim, self.hidden.clone(), self.data.num_labels),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleConfig {
    Constant,
    InverseRound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeConfig {
    Epochs,
    Steps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: ScheduleConfig,
    /// Numerator of the inverse-round schedule.
    pub lr_scale: f64,
    pub gamma_floor: f64,
    pub mode: ModeConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            local_epochs: t.local_epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            schedule: ScheduleConfig::Constant,
            lr_scale: 1.0,
            gamma_floor: 1.0,
            mode: ModeConfig::Epochs,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_schedule: match self.schedule {
                ScheduleConfig::Constant => LrSchedule::Constant,
                ScheduleConfig::InverseRound => LrSchedule::InverseRound {
                    scale: self.lr_scale,
                    gamma_floor: self.gamma_floor,
                },
            },
            mode: match self.mode {
                ModeConfig::Epochs => LocalMode::Epochs,
                ModeConfig::Steps => LocalMode::Steps,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub num_clients: usize,
    /// Share of clients that lack one model.
    pub missing_fraction: f64,
    pub processor_mix: ProcessorMix,
    pub models: Vec<ModelConfig>,
    pub train: TrainSection,
    /// Method name, e.g. `lvr`, `stalevr`, `stale-naive:0.5`.
    pub method: String,
    /// `m = active_rate * V`; ignored when `budget` is set.
    pub active_rate: f64,
    pub budget: Option<f64>,
    pub rounds: usize,
    pub eval_interval: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_clients: 120,
            missing_fraction: 0.1,
            processor_mix: ProcessorMix::default(),
            models: (0..3)
                .map(|s| ModelConfig {
                    name: format!("model{s}"),
                    ..ModelConfig::default()
                })
                .collect(),
            train: TrainSection::default(),
            method: "stalevre".into(),
            active_rate: 0.1,
            budget: None,
            rounds: 150,
            eval_interval: 10,
            seeds: (0..5).collect(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Parses TOML text; unknown keys are rejected and field errors collected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| MmflError::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn method_kind(&self) -> Result<MethodKind> {
        self.method
            .parse()
            .map_err(|e: String| MmflError::Config(vec![format!("method: {e}")]))
    }

    /// Budget `m` for a topology with `processors` processors.
    pub fn budget_for(&self, processors: usize) -> f64 {
        self.budget.unwrap_or(self.active_rate * processors as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.num_clients == 0 {
            errs.push("num_clients: must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.missing_fraction) {
            errs.push(format!("missing_fraction: {} outside [0, 1]", self.missing_fraction));
        }
        let mix = self.processor_mix;
        if [mix.full, mix.half, mix.single].iter().any(|x| !(*x >= 0.0))
            || (mix.full + mix.half + mix.single - 1.0).abs() > 1e-9
        {
            errs.push(format!(
                "processor_mix: shares {}, {}, {} must be non-negative and sum to 1",
                mix.full, mix.half, mix.single
            ));
        }
        if self.models.is_empty() {
            errs.push("models: at least one model is required".into());
        }
        for (s, m) in self.models.iter().enumerate() {
            if let Err(e) = m.data.validate() {
                errs.push(format!("models[{s}].data: {e}"));
            }
            if m.kind == ModelKindConfig::Mlp && (m.hidden.is_empty() || m.hidden.contains(&0)) {
                errs.push(format!("models[{s}].hidden: mlp needs non-zero hidden widths"));
            }
        }
        if let Err(e) = self.train.train_config().validate() {
            errs.push(format!("train: {e}"));
        }
        if self.train.schedule == ScheduleConfig::InverseRound && !(self.train.lr_scale > 0.0) {
            errs.push("train.lr_scale: must be > 0".into());
        }
        if let Err(e) = self.method.parse::<MethodKind>() {
            errs.push(format!("method: {e}"));
        }
        if !(self.active_rate > 0.0 && self.active_rate <= 1.0) {
            errs.push(format!("active_rate: {} outside (0, 1]", self.active_rate));
        }
        if let Some(b) = self.budget {
            if !(b > 0.0) {
                errs.push(format!("budget: {b} must be > 0"));
            }
        }
        if self.eval_interval == 0 {
            errs.push("eval_interval: must be >= 1".into());
        }
        if self.seeds.is_empty() {
            errs.push("seeds: at least one seed is required".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(MmflError::Config(errs))
        }
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    RunConfig::from_toml_str(&text)
}
