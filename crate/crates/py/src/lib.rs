//! Python bindings over the mmfusion core: config presets, training and
//! evaluation entry points, checkpoint-backed prediction, and the metric
//! functions.

use mmfusion::checkpoint::Checkpoint;
use mmfusion::config::{ExperimentConfig, Mode};
use mmfusion::data::{Label, Sample};
use mmfusion::model::ModelParams;
use mmfusion::{metrics, runner, train};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use std::path::Path;

fn to_py_err(e: mmfusion::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyfunction]
fn dominant_preset(seed: u64) -> String {
    ExperimentConfig::dominant_preset(seed).to_toml()
}

#[pyfunction]
fn balanced_xor_preset(seed: u64) -> String {
    ExperimentConfig::balanced_xor_preset(seed).to_toml()
}

#[pyfunction]
fn validate_config(config_toml: &str) -> PyResult<()> {
    ExperimentConfig::from_toml(config_toml)
        .map(|_| ())
        .map_err(to_py_err)
}

/// Train per the config; returns (policy bits, checkpoint path).
#[pyfunction]
fn train_run(config_toml: &str, out_dir: &str) -> PyResult<(Vec<u8>, String)> {
    let cfg = ExperimentConfig::from_toml(config_toml).map_err(to_py_err)?;
    let artifacts = runner::run_train(&cfg, Path::new(out_dir)).map_err(to_py_err)?;
    Ok((
        artifacts.policy,
        artifacts.checkpoint_path.display().to_string(),
    ))
}

/// Evaluate a checkpoint; returns rows of (eta, [(metric, value)], delta).
#[pyfunction]
#[pyo3(signature = (checkpoint, out_dir, etas=None))]
fn eval_run(
    checkpoint: &str,
    out_dir: &str,
    etas: Option<Vec<f64>>,
) -> PyResult<Vec<(f64, Vec<(String, f64)>, Option<f64>)>> {
    let (reports, _) =
        runner::run_eval(Path::new(checkpoint), etas, Path::new(out_dir)).map_err(to_py_err)?;
    Ok(reports
        .into_iter()
        .map(|r| (r.eta, r.metrics, r.delta))
        .collect())
}

#[pyfunction]
fn f1_suite(pred: Vec<Vec<u8>>, truth: Vec<Vec<u8>>) -> PyResult<(f64, f64, f64, f64)> {
    let s = metrics::f1_suite(&pred, &truth).map_err(to_py_err)?;
    Ok((s.micro, s.macro_, s.weighted, s.samples))
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::auroc(&scores, &labels).map_err(to_py_err)
}

#[pyfunction]
fn degradation_delta(full: f64, missing: f64) -> PyResult<f64> {
    metrics::degradation_delta(full, missing).map_err(to_py_err)
}

/// Checkpoint-backed model with availability-aware prediction.
#[pyclass]
struct Model {
    params: ModelParams,
    policy: Vec<u8>,
    baseline: bool,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn from_checkpoint(path: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::load(Path::new(path)).map_err(to_py_err)?;
        let params = ckpt.to_params().map_err(to_py_err)?;
        Ok(Model {
            params,
            policy: ckpt.policy,
            baseline: ckpt.mode == Mode::Baseline,
        })
    }

    #[getter]
    fn policy(&self) -> Vec<u8> {
        self.policy.clone()
    }

    /// Returns (logits, chosen head) for one sample.
    fn predict(
        &self,
        tokens1: Vec<usize>,
        tokens2: Vec<usize>,
        present1: bool,
        present2: bool,
    ) -> PyResult<(Vec<f64>, String)> {
        let sample = Sample {
            tokens1,
            tokens2,
            label: Label::Class(0),
            present1,
            present2,
        };
        let (logits, task) = train::predict(&sample, &self.params, &self.policy, self.baseline)
            .map_err(to_py_err)?;
        Ok((logits, task.as_str().to_string()))
    }
}

#[pymodule]
fn mmfusion_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(dominant_preset, m)?)?;
    m.add_function(wrap_pyfunction!(balanced_xor_preset, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(train_run, m)?)?;
    m.add_function(wrap_pyfunction!(eval_run, m)?)?;
    m.add_function(wrap_pyfunction!(f1_suite, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(degradation_delta, m)?)?;
    Ok(())
}
