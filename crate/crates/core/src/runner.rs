//! Experiment orchestration behind the CLI: seeded training runs, eta-sweep
//! evaluation, and CSV report emission. Every run directory holds the
//! resolved config snapshot, checkpoint, logs, and results.

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Mode};
use crate::data::{generate, Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model::ModelParams;
use crate::policy::{
    bilevel_search, history_csv_header, history_csv_row, retrain_fixed, sample_policy,
    FusionVector,
};
use crate::train::{train, LossReport, TaskWeights};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const RESULTS_SCHEMA: &str = "# mmfusion results schema v1";

fn dataset_name(cfg: &ExperimentConfig) -> String {
    if cfg.data.xor_mode {
        "balanced-xor".to_string()
    } else {
        format!("dominant-{:.2}", cfg.data.dominance)
    }
}

fn policy_str(policy: &[u8]) -> String {
    policy.iter().map(|b| b.to_string()).collect()
}

fn write_train_log(path: &Path, log: &[LossReport]) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{}", LossReport::csv_header());
    for (step, report) in log.iter().enumerate() {
        let _ = writeln!(out, "{}", report.csv_row(step));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Fixed-policy training with a checkpoint refreshed after every epoch, so a
/// mid-run NaN abort leaves the last good checkpoint on disk.
fn train_checkpointed(
    params: &mut ModelParams,
    cfg: &ExperimentConfig,
    train_set: &[Sample],
    weights: &TaskWeights,
    policy: &[u8],
    baseline: bool,
    checkpoint_path: &Path,
) -> Result<Vec<LossReport>> {
    let mut log = Vec::new();
    for epoch in 0..cfg.training.epochs {
        let mut settings = cfg.training.clone();
        settings.epochs = 1;
        settings.seed = cfg.training.seed.wrapping_add(epoch as u64);
        let result = train(params, train_set, weights, policy, baseline, &settings);
        match result {
            Ok(mut epoch_log) => log.append(&mut epoch_log),
            Err(e) => {
                return Err(e); // last-good checkpoint from the previous epoch remains
            }
        }
        Checkpoint::new(cfg.mode, policy.to_vec(), cfg.clone(), params)
            .save(checkpoint_path)?;
    }
    Ok(log)
}

pub struct TrainArtifacts {
    pub checkpoint_path: PathBuf,
    pub policy: Vec<u8>,
}

/// `train` subcommand: run the configured mode, write checkpoint and logs.
pub fn run_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    let dataset: Dataset = generate(&cfg.data)?;
    let checkpoint_path = out_dir.join("checkpoint.txt");
    let fixed_policy =
        FusionVector::from_start_layer(cfg.fusion_start_layer, cfg.model.m_layers);
    let mut params = ModelParams::init(
        cfg.model.clone(),
        cfg.encoder.clone(),
        cfg.training.seed,
    )?;
    params.verify_masks()?;
    let policy;
    let log;
    match cfg.mode {
        Mode::Baseline => {
            policy = fixed_policy.s.clone();
            log = train_checkpointed(
                &mut params,
                cfg,
                &dataset.train,
                &TaskWeights::joint_only(),
                &policy,
                true,
                &checkpoint_path,
            )?;
        }
        Mode::Multitask => {
            policy = fixed_policy.s.clone();
            log = train_checkpointed(
                &mut params,
                cfg,
                &dataset.train,
                &cfg.weights,
                &policy,
                false,
                &checkpoint_path,
            )?;
        }
        Mode::MultitaskSearch => {
            let mut history = Vec::new();
            let search_result = bilevel_search(
                &mut params,
                &dataset.train,
                &dataset.val,
                &cfg.weights,
                &cfg.search,
                &mut history,
            );
            let mut hist_text = String::new();
            let _ = writeln!(hist_text, "{}", history_csv_header(cfg.model.m_layers));
            for row in &history {
                let _ = writeln!(hist_text, "{}", history_csv_row(row));
            }
            std::fs::write(out_dir.join("search_history.csv"), hist_text)?;
            let alpha = search_result?;
            let learned = sample_policy(&alpha.alpha);
            // retrain from scratch on the whole training data with the
            // learned policy fixed
            let mut whole_train = dataset.train.clone();
            whole_train.extend(dataset.val.iter().cloned());
            let (retrained, retrain_log) = retrain_fixed(
                &learned,
                &whole_train,
                &cfg.weights,
                &cfg.training,
                cfg.model.clone(),
                cfg.encoder.clone(),
            )?;
            params = retrained;
            policy = learned.s.clone();
            log = retrain_log;
            Checkpoint::new(cfg.mode, policy.clone(), cfg.clone(), &params)
                .save(&checkpoint_path)?;
        }
    }
    write_train_log(&out_dir.join("train_log.csv"), &log)?;
    Checkpoint::new(cfg.mode, policy.clone(), cfg.clone(), &params).save(&checkpoint_path)?;
    Ok(TrainArtifacts {
        checkpoint_path,
        policy,
    })
}

pub fn results_csv(cfg: &ExperimentConfig, reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{RESULTS_SCHEMA}");
    let _ = writeln!(out, "dataset,seed,policy,eta,metric,value,delta");
    let name = dataset_name(cfg);
    for r in reports {
        for (metric, value) in &r.metrics {
            let delta = match r.delta {
                Some(d) => format!("{:.1}", crate::metrics::round1(d)),
                None => String::new(),
            };
            let _ = writeln!(
                out,
                "{name},{},{},{:.2},{metric},{value:.6},{delta}",
                r.seed,
                policy_str(&r.policy),
                r.eta
            );
        }
    }
    out
}

/// Compact text summary of the primary metric over the eta grid.
pub fn summary_table(cfg: &ExperimentConfig, reports: &[EvalReport]) -> String {
    let primary = crate::metrics::primary_metric(cfg.model.task_type);
    let mut out = String::new();
    let _ = writeln!(out, "dataset: {}", dataset_name(cfg));
    let _ = writeln!(out, "{:>6} {:>12} {:>8}", "eta", primary, "delta%");
    for r in reports {
        let value = r.metric(primary).unwrap_or(f64::NAN);
        let delta = r
            .delta
            .map(|d| format!("{:.1}", crate::metrics::round1(d)))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(out, "{:>6.2} {:>12.4} {:>8}", r.eta, value, delta);
    }
    out
}

/// `eval` subcommand: full-vs-missing protocol over the eta grid.
pub fn run_eval(
    checkpoint_path: &Path,
    etas_override: Option<Vec<f64>>,
    out_dir: &Path,
) -> Result<(Vec<EvalReport>, String)> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let cfg = ckpt.config.clone();
    let params = ckpt.to_params()?;
    let dataset = generate(&cfg.data)?;
    let etas = etas_override.unwrap_or_else(|| cfg.eval.etas.clone());
    let reports = evaluate(
        &params,
        &ckpt.policy,
        ckpt.mode == Mode::Baseline,
        &dataset.test,
        &etas,
        cfg.eval.target_modality,
        cfg.eval.missingness_seed,
        cfg.data.seed,
    )?;
    std::fs::create_dir_all(out_dir)?;
    let csv = results_csv(&cfg, &reports);
    std::fs::write(out_dir.join("results.csv"), &csv)?;
    let table = summary_table(&cfg, &reports);
    Ok((reports, table))
}

/// `sweep` subcommand: train and evaluate per seed, aggregate mean/min/max.
pub fn run_sweep(
    base_cfg: &ExperimentConfig,
    seeds: &[u64],
    etas: &[f64],
    out_dir: &Path,
) -> Result<PathBuf> {
    base_cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("sweep requires at least one seed".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut long = String::new();
    let _ = writeln!(long, "{RESULTS_SCHEMA}");
    let _ = writeln!(long, "dataset,seed,eta,metric,value");
    // per (eta, metric) accumulation in first-seen order
    let mut cells: Vec<((String, String), Vec<f64>)> = Vec::new();
    let name = dataset_name(base_cfg);
    for &seed in seeds {
        let mut cfg = base_cfg.clone();
        cfg.data.seed = seed;
        cfg.training.seed = seed;
        cfg.search.seed = seed;
        cfg.eval.etas = etas.to_vec();
        let run_dir = out_dir.join(format!("seed_{seed}"));
        let artifacts = run_train(&cfg, &run_dir)?;
        let (reports, _) = run_eval(&artifacts.checkpoint_path, Some(etas.to_vec()), &run_dir)?;
        for r in &reports {
            for (metric, value) in &r.metrics {
                let _ = writeln!(long, "{name},{seed},{:.2},{metric},{value:.6}", r.eta);
                let key = (format!("{:.2}", r.eta), metric.clone());
                match cells.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, values)) => values.push(*value),
                    None => cells.push((key, vec![*value])),
                }
            }
        }
    }
    std::fs::write(out_dir.join("sweep_long.csv"), long)?;
    let mut agg = String::new();
    let _ = writeln!(agg, "{RESULTS_SCHEMA}");
    let _ = writeln!(agg, "dataset,eta,metric,mean,min,max,n_seeds");
    for ((eta, metric), values) in &cells {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            agg,
            "{name},{eta},{metric},{mean:.6},{min:.6},{max:.6},{}",
            values.len()
        );
    }
    let path = out_dir.join("sweep.csv");
    std::fs::write(&path, agg)?;
    Ok(path)
}

/// `search-history` subcommand: dump the recorded policy trajectory.
pub fn run_search_history(out_dir: &Path) -> Result<String> {
    let path = out_dir.join("search_history.csv");
    if !path.exists() {
        return Err(Error::InvalidConfig(format!(
            "no search history at {}",
            path.display()
        )));
    }
    Ok(std::fs::read_to_string(path)?)
}
