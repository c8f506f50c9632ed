//! Evaluation metrics: the F1 family for multilabel outputs, accuracy,
//! rank-based AUROC, the degradation measure, and the full-vs-missing
//! evaluation protocol over an eta grid.

use crate::data::{apply_missingness, Label, MissingnessSpec, Modality, Sample, TaskType};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::train::predict;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Suite {
    pub micro: f64,
    pub macro_: f64,
    pub weighted: f64,
    pub samples: f64,
}

fn f1_from_counts(tp: f64, fp: f64, fn_: f64) -> f64 {
    let denom = 2.0 * tp + fp + fn_;
    if denom == 0.0 {
        0.0 // zero-denominator convention
    } else {
        2.0 * tp / denom
    }
}

/// All four F1 variants over binary prediction/truth matrices (N x C).
pub fn f1_suite(pred_bits: &[Vec<u8>], true_bits: &[Vec<u8>]) -> Result<F1Suite> {
    if pred_bits.len() != true_bits.len() || pred_bits.is_empty() {
        return Err(Error::Metric(format!(
            "prediction rows {} vs truth rows {}",
            pred_bits.len(),
            true_bits.len()
        )));
    }
    let c = true_bits[0].len();
    if c == 0 || pred_bits.iter().chain(true_bits).any(|r| r.len() != c) {
        return Err(Error::Metric("ragged or empty bit matrix".into()));
    }
    let n = pred_bits.len();
    let mut tp = vec![0.0; c];
    let mut fp = vec![0.0; c];
    let mut fn_ = vec![0.0; c];
    let mut support = vec![0.0; c];
    let mut samples_sum = 0.0;
    for i in 0..n {
        let mut stp = 0.0;
        let mut sfp = 0.0;
        let mut sfn = 0.0;
        for j in 0..c {
            let (p, t) = (pred_bits[i][j], true_bits[i][j]);
            match (p, t) {
                (1, 1) => {
                    tp[j] += 1.0;
                    stp += 1.0;
                }
                (1, 0) => {
                    fp[j] += 1.0;
                    sfp += 1.0;
                }
                (0, 1) => {
                    fn_[j] += 1.0;
                    sfn += 1.0;
                }
                _ => {}
            }
            if t == 1 {
                support[j] += 1.0;
            }
        }
        samples_sum += f1_from_counts(stp, sfp, sfn);
    }
    let micro = f1_from_counts(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let per_class: Vec<f64> = (0..c).map(|j| f1_from_counts(tp[j], fp[j], fn_[j])).collect();
    let macro_ = per_class.iter().sum::<f64>() / c as f64;
    let total_support: f64 = support.iter().sum();
    let weighted = if total_support == 0.0 {
        0.0
    } else {
        per_class
            .iter()
            .zip(&support)
            .map(|(f, s)| f * s)
            .sum::<f64>()
            / total_support
    };
    Ok(F1Suite {
        micro,
        macro_,
        weighted,
        samples: samples_sum / n as f64,
    })
}

/// Mann-Whitney rank formulation; tied scores contribute 1/2.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Metric("scores and labels must be nonempty and equal-length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUROC requires both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // average ranks over tie groups (1-based ranks)
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter_map(|(&l, &r)| (l == 1).then_some(r))
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Relative performance drop from the full to the missing test set, percent.
pub fn degradation_delta(full_score: f64, missing_score: f64) -> Result<f64> {
    if full_score <= 0.0 {
        return Err(Error::Metric(format!("full score must be positive, got {full_score}")));
    }
    Ok((full_score - missing_score) / full_score * 100.0)
}

/// One decimal, as reported.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Metric bundle for one (eta, seed, model) cell.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub eta: f64,
    pub seed: u64,
    pub policy: Vec<u8>,
    pub n_samples: usize,
    /// Ordered metric name -> value pairs, all in [0,1].
    pub metrics: Vec<(String, f64)>,
    /// Degradation of the primary metric vs the eta = 1 reference, percent.
    pub delta: Option<f64>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

/// The metric used for the delta column, per task type.
pub fn primary_metric(task_type: TaskType) -> &'static str {
    match task_type {
        TaskType::Multilabel => "f1_macro",
        TaskType::Multiclass => "accuracy",
        TaskType::Binary => "auroc",
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Task-appropriate metrics for one corrupted test set.
pub fn score_predictions(
    task_type: TaskType,
    logits: &[Vec<f64>],
    labels: &[Label],
) -> Result<Vec<(String, f64)>> {
    match task_type {
        TaskType::Multiclass => {
            let correct = logits
                .iter()
                .zip(labels)
                .filter(|(lg, lb)| crate::tape::argmax_tiebreak(lg) == lb.as_class())
                .count();
            Ok(vec![(
                "accuracy".into(),
                correct as f64 / labels.len() as f64,
            )])
        }
        TaskType::Multilabel => {
            let pred: Vec<Vec<u8>> = logits
                .iter()
                .map(|lg| lg.iter().map(|&x| u8::from(sigmoid(x) >= 0.5)).collect())
                .collect();
            let truth: Vec<Vec<u8>> = labels
                .iter()
                .map(|lb| {
                    lb.as_bits(logits[0].len())
                        .iter()
                        .map(|&b| b as u8)
                        .collect()
                })
                .collect();
            let f1 = f1_suite(&pred, &truth)?;
            Ok(vec![
                ("f1_micro".into(), f1.micro),
                ("f1_macro".into(), f1.macro_),
                ("f1_weighted".into(), f1.weighted),
                ("f1_samples".into(), f1.samples),
            ])
        }
        TaskType::Binary => {
            let scores: Vec<f64> = logits.iter().map(|lg| sigmoid(lg[0])).collect();
            let truth: Vec<u8> = labels.iter().map(|lb| lb.as_class() as u8).collect();
            let correct = scores
                .iter()
                .zip(&truth)
                .filter(|(&s, &t)| u8::from(s >= 0.5) == t)
                .count();
            Ok(vec![
                ("auroc".into(), auroc(&scores, &truth)?),
                ("accuracy".into(), correct as f64 / truth.len() as f64),
            ])
        }
    }
}

/// Full-vs-missing protocol: corrupt the test set at each eta, predict with
/// availability-aware head selection, and report the primary-metric delta
/// against the eta = 1 reference.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &ModelParams,
    policy_s: &[u8],
    baseline: bool,
    test_set: &[Sample],
    etas: &[f64],
    target: Modality,
    missing_seed: u64,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    if test_set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let task_type = params.cfg.task_type;
    let primary = primary_metric(task_type);
    let mut full_reference: Option<f64> = None;
    // the eta = 1 reference is computed first regardless of grid order
    let mut grid: Vec<f64> = etas.to_vec();
    grid.sort_by(|a, b| b.partial_cmp(a).expect("finite etas"));
    let mut by_eta = Vec::new();
    for &eta in &grid {
        let corrupted = apply_missingness(
            test_set,
            &MissingnessSpec {
                eta,
                target_modality: target,
                seed: missing_seed,
            },
        );
        let mut logits = Vec::with_capacity(corrupted.len());
        let mut labels = Vec::with_capacity(corrupted.len());
        for s in &corrupted {
            let (lg, _task) = predict(s, params, policy_s, baseline)?;
            logits.push(lg);
            labels.push(s.label.clone());
        }
        let metrics = score_predictions(task_type, &logits, &labels)?;
        let score = metrics
            .iter()
            .find(|(n, _)| n == primary)
            .map(|(_, v)| *v)
            .expect("primary metric present");
        if full_reference.is_none() {
            full_reference = Some(score);
        }
        let delta = full_reference
            .filter(|&f| f > 0.0)
            .map(|f| degradation_delta(f, score))
            .transpose()?;
        by_eta.push(EvalReport {
            eta,
            seed,
            policy: policy_s.to_vec(),
            n_samples: corrupted.len(),
            metrics,
            delta,
        });
    }
    // restore the caller's grid order
    let mut out = Vec::with_capacity(etas.len());
    for &eta in etas {
        let pos = by_eta
            .iter()
            .position(|r| r.eta == eta)
            .expect("report for every eta");
        out.push(by_eta[pos].clone());
    }
    Ok(out)
}
