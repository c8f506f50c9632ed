//! Experiment configuration: TOML with one table per subsystem. A resolved
//! snapshot is written into every run directory and into checkpoints.

use crate::data::{Modality, SyntheticSpec, TaskType};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::policy::SearchConfig;
use crate::train::{TaskWeights, TrainSettings};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Multitask,
    MultitaskSearch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSettings {
    pub etas: Vec<f64>,
    pub target_modality: Modality,
    pub missingness_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            etas: vec![1.0, 0.7, 0.5, 0.3, 0.1, 0.0],
            target_modality: Modality::M2,
            missingness_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// First layer (0-based) at which fusion starts for fixed-policy modes.
    #[serde(default)]
    pub fusion_start_layer: usize,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub data: SyntheticSpec,
    pub weights: TaskWeights,
    pub search: SearchConfig,
    pub training: TrainSettings,
    pub eval: EvalSettings,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.weights.validate()?;
        self.search.validate()?;
        if self.encoder.d_model != self.model.d_model {
            return Err(Error::InvalidConfig(
                "encoder.d_model must equal model.d_model".into(),
            ));
        }
        if self.encoder.vocab1 != self.data.vocab1 || self.encoder.vocab2 != self.data.vocab2 {
            return Err(Error::InvalidConfig(
                "encoder vocabularies must match data vocabularies".into(),
            ));
        }
        if self.encoder.max_len1 < self.data.len1 || self.encoder.max_len2 < self.data.len2 {
            return Err(Error::InvalidConfig(
                "encoder.max_len must cover data token lengths".into(),
            ));
        }
        if self.fusion_start_layer >= self.model.m_layers {
            return Err(Error::InvalidConfig(format!(
                "fusion_start_layer {} out of range for {} layers",
                self.fusion_start_layer, self.model.m_layers
            )));
        }
        match self.model.task_type {
            TaskType::Binary => {
                if self.model.n_classes != 1 || self.data.n_classes != 2 {
                    return Err(Error::InvalidConfig(
                        "binary task requires model.n_classes = 1 and data.n_classes = 2".into(),
                    ));
                }
            }
            _ => {
                if self.model.n_classes != self.data.n_classes {
                    return Err(Error::InvalidConfig(
                        "model.n_classes must equal data.n_classes".into(),
                    ));
                }
            }
        }
        if self.model.task_type != self.data.task_type {
            return Err(Error::InvalidConfig(
                "model.task_type must equal data.task_type".into(),
            ));
        }
        for &eta in &self.eval.etas {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::InvalidConfig(format!("eval.etas entry {eta} not in [0,1]")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Ready-to-run config on the dominant-modality preset.
    pub fn dominant_preset(seed: u64) -> Self {
        let data = SyntheticSpec::dominant(seed);
        ExperimentConfig {
            mode: Mode::Multitask,
            fusion_start_layer: 0,
            model: ModelConfig {
                m_layers: 4,
                heads: 2,
                d_model: 32,
                d_ff: 64,
                n_classes: data.n_classes,
                task_type: data.task_type,
            },
            encoder: EncoderConfig {
                d_model: 32,
                vocab1: data.vocab1,
                vocab2: data.vocab2,
                max_len1: data.len1,
                max_len2: data.len2,
            },
            weights: TaskWeights::default(),
            // desk-scale search settings; the defaults move alpha too
            // slowly for runs this short
            search: SearchConfig {
                seed,
                beta: 0.05,
                convergence_window: 30,
                ..SearchConfig::default()
            },
            training: TrainSettings {
                epochs: 4,
                batch_size: 32,
                lr: 1e-3,
                weight_decay: 2e-2,
                seed,
                modality_dropout: 0.0,
                dropout_target: Modality::M2,
            },
            eval: EvalSettings {
                target_modality: Modality::M1,
                ..EvalSettings::default()
            },
            data,
        }
    }

    /// Ready-to-run config on the balanced-xor preset.
    pub fn balanced_xor_preset(seed: u64) -> Self {
        let data = SyntheticSpec::balanced_xor(seed);
        let mut cfg = Self::dominant_preset(seed);
        cfg.mode = Mode::MultitaskSearch;
        cfg.model.n_classes = data.n_classes;
        cfg.model.task_type = data.task_type;
        cfg.encoder.vocab1 = data.vocab1;
        cfg.encoder.vocab2 = data.vocab2;
        cfg.encoder.max_len1 = data.len1;
        cfg.encoder.max_len2 = data.len2;
        cfg.eval.target_modality = Modality::M2;
        cfg.data = data;
        cfg
    }
}
