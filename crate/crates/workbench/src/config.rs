//! The declarative TOML document behind every CLI command.
//!
//! A config file only needs the keys it changes; everything else falls back
//! to the defaults, section by section and key by key.

use std::path::{Path, PathBuf};

use gradia_core::model::ModelConfig;
use gradia_core::synthetic::{OracleConfig, SceneSpec, SplitCounts};
use gradia_core::trainer::{FewShotConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{read_required, Result, WorkbenchError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Instances across all splits, divided 70/15/15.
    pub total: usize,
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            total: 1000,
            scene: SceneSpec::default(),
        }
    }
}

impl DataConfig {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts::from_total(self.total)
    }
}

/// The few-shot study: a base model pretrained on one synthetic
/// distribution, shots and test images drawn from another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSettings {
    pub shots: Vec<usize>,
    pub num_seeds: usize,
    pub arms: FewShotConfig,
    pub sweep_weights: Vec<f64>,
    pub sweep_shots: usize,
    pub pretrain_cooccurrence: f64,
    pub pretrain_epochs: usize,
    pub pretrain_seed: u64,
    pub target_cooccurrence: f64,
    pub target_seed: u64,
    pub total: usize,
}

impl Default for FewShotSettings {
    fn default() -> Self {
        Self {
            shots: vec![1, 5, 10, 50],
            num_seeds: 10,
            arms: FewShotConfig::default(),
            sweep_weights: vec![0.0, 0.25, 0.5, 0.75],
            sweep_shots: 5,
            pretrain_cooccurrence: 1.0,
            pretrain_epochs: 5,
            pretrain_seed: 1000,
            target_cooccurrence: 0.5,
            target_seed: 2000,
            total: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkbenchConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub baseline: TrainConfig,
    pub finetune: TrainConfig,
    pub oracle: OracleConfig,
    pub fewshot: FewShotSettings,
}

impl Default for WorkbenchConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            baseline: TrainConfig::baseline(),
            finetune: TrainConfig::finetune(),
            oracle: OracleConfig::default(),
            fewshot: FewShotSettings::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
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

impl WorkbenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let over: toml::Value = toml::from_str(text).map_err(|e| WorkbenchError::Config(format!("config: {e}")))?;
        let mut base = toml::Value::try_from(Self::default()).map_err(|e| WorkbenchError::Runtime(e.to_string()))?;
        merge(&mut base, over);
        let config: Self = base
            .try_into()
            .map_err(|e: toml::de::Error| WorkbenchError::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a config file; a missing file is a config error since the user
    /// named it.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_required(path, "config file").map_err(|e| match e {
            WorkbenchError::Missing(m) => WorkbenchError::Config(format!("cannot read {m}")),
            other => other,
        })?;
        let text = String::from_utf8(bytes).map_err(|e| WorkbenchError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn load_or_default(path: Option<&PathBuf>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), |p| Self::load(p))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| WorkbenchError::Runtime(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        if self.data.total < 3 {
            return Err(WorkbenchError::Config("data.total must be at least 3".into()));
        }
        self.model.validate()?;
        if self.model.input_height != self.data.scene.image_size || self.model.input_width != self.data.scene.image_size {
            return Err(WorkbenchError::Config(format!(
                "model input {}x{} does not match {}px scenes",
                self.model.input_height, self.model.input_width, self.data.scene.image_size
            )));
        }
        self.baseline.validate()?;
        self.finetune.validate()?;
        self.oracle.validate()?;
        let f = &self.fewshot;
        f.arms.finetune.validate()?;
        if f.shots.is_empty() || f.shots.contains(&0) || f.num_seeds == 0 || f.sweep_shots == 0 {
            return Err(WorkbenchError::Config("few-shot counts and seeds must be at least 1".into()));
        }
        if f.sweep_weights.iter().chain([&f.arms.attention_weight]).any(|w| !(0.0..=1.0).contains(w)) {
            return Err(WorkbenchError::Config("attention weights must lie in [0, 1]".into()));
        }
        if f.pretrain_epochs == 0 {
            return Err(WorkbenchError::Config("fewshot.pretrain_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gradia_core::loss::Condition;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = WorkbenchConfig::default();
        assert_eq!(WorkbenchConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn partial_documents_override_single_keys() {
        let c = WorkbenchConfig::from_toml("[finetune]\nepochs = 3\ncondition = \"C2\"\n[data]\ntotal = 60\n").unwrap();
        assert_eq!(c.finetune.epochs, 3);
        assert_eq!(c.finetune.condition, Condition::C2);
        assert_eq!(c.finetune.learning_rate, TrainConfig::finetune().learning_rate);
        assert_eq!(c.data.total, 60);
        assert_eq!(c.data.scene, SceneSpec::default());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for doc in [
            "[finetune]\nepochs = 0",
            "[finetune]\nlearning_rate = -1.0",
            "[data.scene]\ncontext_cooccurrence_train = 1.5",
            "[finetune.factors]\nalpha = 2.0",
            "not toml at all [",
            "[finetune]\nepochs = \"ten\"",
        ] {
            let err = WorkbenchConfig::from_toml(doc).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{doc}: {err}");
        }
    }
}
