//! Text checkpoint format, bit-exact by construction.
//!
//! ```text
//! mmfusion-checkpoint v1
//! mode <baseline|multitask|multitask_search>
//! policy <space-separated 0/1 fusion vector>
//! config-begin
//! <resolved experiment config, TOML>
//! config-end
//! tensor <name> <dim0> [dim1 ...]
//! <one line of space-separated 16-digit hex f64 bit patterns>
//! ...
//! ```

use crate::config::{ExperimentConfig, Mode};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::Path;

const MAGIC: &str = "mmfusion-checkpoint v1";

pub struct Checkpoint {
    pub mode: Mode,
    pub policy: Vec<u8>,
    pub config: ExperimentConfig,
    pub tensors: Vec<(String, Tensor)>,
}

fn mode_str(mode: Mode) -> &'static str {
    match mode {
        Mode::Baseline => "baseline",
        Mode::Multitask => "multitask",
        Mode::MultitaskSearch => "multitask_search",
    }
}

fn mode_from_str(s: &str) -> Result<Mode> {
    match s {
        "baseline" => Ok(Mode::Baseline),
        "multitask" => Ok(Mode::Multitask),
        "multitask_search" => Ok(Mode::MultitaskSearch),
        other => Err(Error::Checkpoint(format!("unknown mode {other}"))),
    }
}

impl Checkpoint {
    pub fn new(mode: Mode, policy: Vec<u8>, config: ExperimentConfig, params: &ModelParams) -> Self {
        let tensors = params
            .names
            .iter()
            .cloned()
            .zip(params.tensors.iter().cloned())
            .collect();
        Checkpoint {
            mode,
            policy,
            config,
            tensors,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "mode {}", mode_str(self.mode));
        let policy: Vec<String> = self.policy.iter().map(|b| b.to_string()).collect();
        let _ = writeln!(out, "policy {}", policy.join(" "));
        let _ = writeln!(out, "config-begin");
        out.push_str(&self.config.to_toml());
        if !out.ends_with('\n') {
            out.push('\n');
        }
        let _ = writeln!(out, "config-end");
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "tensor {name} {}", dims.join(" "));
            let words: Vec<String> = t.data.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
            let _ = writeln!(out, "{}", words.join(" "));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Checkpoint("bad magic line".into()));
        }
        let mode_line = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("missing mode".into()))?;
        let mode = mode_from_str(
            mode_line
                .strip_prefix("mode ")
                .ok_or_else(|| Error::Checkpoint("missing mode prefix".into()))?,
        )?;
        let policy_line = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("missing policy".into()))?;
        let policy = policy_line
            .strip_prefix("policy ")
            .ok_or_else(|| Error::Checkpoint("missing policy prefix".into()))?
            .split_whitespace()
            .map(|b| match b {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(Error::Checkpoint(format!("bad policy bit {other}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        if lines.next() != Some("config-begin") {
            return Err(Error::Checkpoint("missing config-begin".into()));
        }
        let mut config_text = String::new();
        for line in lines.by_ref() {
            if line == "config-end" {
                break;
            }
            config_text.push_str(line);
            config_text.push('\n');
        }
        let config = ExperimentConfig::from_toml(&config_text)?;
        let mut tensors = Vec::new();
        while let Some(header) = lines.next() {
            if header.trim().is_empty() {
                continue;
            }
            let mut parts = header.split_whitespace();
            if parts.next() != Some("tensor") {
                return Err(Error::Checkpoint(format!("expected tensor header, got {header}")));
            }
            let name = parts
                .next()
                .ok_or_else(|| Error::Checkpoint("tensor header missing name".into()))?
                .to_string();
            let shape = parts
                .map(|d| d.parse::<usize>().map_err(|e| Error::Checkpoint(e.to_string())))
                .collect::<Result<Vec<usize>>>()?;
            let data_line = lines
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing data")))?;
            let data = data_line
                .split_whitespace()
                .map(|w| {
                    u64::from_str_radix(w, 16)
                        .map(f64::from_bits)
                        .map_err(|e| Error::Checkpoint(e.to_string()))
                })
                .collect::<Result<Vec<f64>>>()?;
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::Checkpoint(format!("tensor {name} shape/data mismatch")));
            }
            tensors.push((name, Tensor::new(shape, data)));
        }
        Ok(Checkpoint {
            mode,
            policy,
            config,
            tensors,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// Rebuild model parameters, checking names and shapes against the config.
    pub fn to_params(&self) -> Result<ModelParams> {
        let mut params = ModelParams::init(
            self.config.model.clone(),
            self.config.encoder.clone(),
            self.config.training.seed,
        )?;
        if self.tensors.len() != params.names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                params.names.len(),
                self.tensors.len()
            )));
        }
        for (name, tensor) in &self.tensors {
            let idx = params
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if params.tensors[idx].shape != tensor.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} shape {:?} does not match config {:?}",
                    tensor.shape, params.tensors[idx].shape
                )));
            }
            params.tensors[idx] = tensor.clone();
        }
        Ok(params)
    }
}
