//! Fusion-policy search: softmax over per-layer policy parameters, hard
//! one-hot selection with a straight-through gradient, the lower-triangular
//! policy matrix turning the one-hot pick into a suffix-ones fusion vector,
//! and the bi-level search loop followed by fixed-policy retraining.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{model_forward, ModelParams, PolicyInput};
use crate::optim::{AdamConfig, AdamState};
use crate::tape::{argmax_tiebreak, Tape, Var};
use crate::tensor::Tensor;
use crate::train::{task_loss, total_loss, TaskWeights, TrainSettings};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub alpha: Vec<f64>,
}

impl PolicyParams {
    pub fn uniform(m: usize) -> Self {
        PolicyParams {
            alpha: vec![0.0; m],
        }
    }
}

/// Lower-triangular all-ones policy matrix: column j is the fusion vector
/// "fuse from layer j onward".
pub fn q_matrix(m: usize) -> Tensor {
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            data[i * m + j] = 1.0;
        }
    }
    Tensor::matrix(m, m, data)
}

/// Hard 0/1 fusion vector plus the soft distribution it was sampled from.
/// Always suffix-ones with at least one 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionVector {
    pub s: Vec<u8>,
    pub soft: Vec<f64>,
}

impl FusionVector {
    pub fn from_start_layer(start: usize, m: usize) -> Self {
        assert!(start < m, "fusion start layer {start} out of {m} layers");
        FusionVector {
            s: (0..m).map(|l| u8::from(l >= start)).collect(),
            soft: (0..m).map(|l| f64::from(u8::from(l == start))).collect(),
        }
    }

    pub fn first_fusion_layer(&self) -> usize {
        self.s.iter().position(|&b| b == 1).expect("suffix-ones vector has a 1")
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

/// Sample the hard fusion vector from the policy parameters (no tape).
pub fn sample_policy(alpha: &[f64]) -> FusionVector {
    let soft = softmax(alpha);
    let j = argmax_tiebreak(&soft);
    let m = alpha.len();
    FusionVector {
        s: (0..m).map(|l| u8::from(l >= j)).collect(),
        soft,
    }
}

/// Same sampling recorded on a tape: returns the 1 x M fusion-vector node
/// whose forward value is hard 0/1 and whose backward path is the softmax.
pub fn sample_policy_on_tape(tape: &mut Tape, alpha_var: Var) -> Result<(Var, FusionVector)> {
    let m = tape.value(alpha_var).numel();
    let soft = tape.softmax_rows(alpha_var)?;
    let hard = tape.straight_through_onehot(soft);
    // s = Q . s_h, realized as the row product s_h . Q^T
    let mut qt = q_matrix(m);
    {
        // transpose in place (square)
        let data = qt.data.clone();
        for i in 0..m {
            for j in 0..m {
                qt.data[i * m + j] = data[j * m + i];
            }
        }
    }
    let qt = tape.constant(qt);
    let s_var = tape.matmul(hard, qt)?;
    let fv = FusionVector {
        s: tape.value(s_var).data.iter().map(|&x| u8::from(x >= 0.5)).collect(),
        soft: tape.value(soft).data.clone(),
    };
    Ok((s_var, fv))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Inner iterations per outer step.
    pub k_inner: usize,
    /// Inner-level (plain SGD) learning rate.
    pub gamma: f64,
    /// Outer-level policy learning rate.
    pub beta: f64,
    pub policy_weight_decay: f64,
    pub max_outer_steps: usize,
    pub batch_size: usize,
    /// Outer steps with an unchanged argmax that count as convergence.
    pub convergence_window: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            k_inner: 4,
            gamma: 0.05,
            beta: 3e-3,
            policy_weight_decay: 3e-5,
            max_outer_steps: 200,
            batch_size: 16,
            convergence_window: 20,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_inner == 0 {
            return Err(Error::InvalidConfig("k_inner must be >= 1".into()));
        }
        if self.gamma <= 0.0 || self.beta <= 0.0 {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SearchHistoryRow {
    pub outer_step: usize,
    pub argmax: usize,
    pub soft: Vec<f64>,
    pub val_loss: f64,
    /// Outer policy sample disagreed with the last inner sample.
    pub argmax_mismatch: bool,
}

pub fn history_csv_header(m: usize) -> String {
    let soft_cols: Vec<String> = (0..m).map(|i| format!("soft_{i}")).collect();
    format!("outer_step,argmax,val_loss,mismatch,{}", soft_cols.join(","))
}

pub fn history_csv_row(row: &SearchHistoryRow) -> String {
    let soft: Vec<String> = row.soft.iter().map(|v| format!("{v:.6}")).collect();
    format!(
        "{},{},{:.6},{},{}",
        row.outer_step,
        row.argmax,
        row.val_loss,
        u8::from(row.argmax_mismatch),
        soft.join(",")
    )
}

fn sgd_step(params: &mut ModelParams, grads: &[Option<Tensor>], gamma: f64) {
    for (p, g) in params.tensors.iter_mut().zip(grads) {
        if let Some(g) = g {
            for (pv, gv) in p.data.iter_mut().zip(&g.data) {
                *pv -= gamma * gv;
            }
        }
    }
}

/// Bi-level search loop. The model parameters warm-start across
/// outer iterations (inner progress is kept). The outer gradient is
/// first-order: it backpropagates the outer forward pass only, through the
/// straight-through path of the freshly sampled policy. Appends one history
/// row per completed outer step.
pub fn bilevel_search(
    params: &mut ModelParams,
    train_set: &[Sample],
    val_set: &[Sample],
    weights: &TaskWeights,
    cfg: &SearchConfig,
    history: &mut Vec<SearchHistoryRow>,
) -> Result<PolicyParams> {
    cfg.validate()?;
    if val_set.is_empty() {
        return Err(Error::EmptyValSet);
    }
    if train_set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let m = params.cfg.m_layers;
    let mut alpha = PolicyParams::uniform(m);
    let mut alpha_adam = AdamState::new(
        AdamConfig {
            lr: cfg.beta,
            weight_decay: cfg.policy_weight_decay,
            ..AdamConfig::default()
        },
        &[Tensor::vector(alpha.alpha.clone())],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6269_6c76);
    let mut stable_argmax = argmax_tiebreak(&softmax(&alpha.alpha));
    let mut stable_count = 0usize;
    for outer in 0..cfg.max_outer_steps {
        let train_batch = sample_batch(train_set, cfg.batch_size, &mut rng);
        let val_batch = sample_batch(val_set, cfg.batch_size, &mut rng);
        // lower level: K plain-SGD steps on theta, fresh policy sample each k
        let mut last_inner_argmax = 0;
        for _k in 0..cfg.k_inner {
            let fv = sample_policy(&alpha.alpha);
            last_inner_argmax = fv.first_fusion_layer();
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let (total, _) = total_loss(
                &mut tape,
                &train_batch,
                params,
                &vars,
                weights,
                &PolicyInput::Hard(&fv.s),
            )?;
            let grads = tape.backward(total)?;
            let grad_vec: Vec<Option<Tensor>> = vars
                .vars
                .iter()
                .map(|&v| grads.get(v).cloned())
                .collect();
            sgd_step(params, &grad_vec, cfg.gamma);
        }
        // upper level: one policy-parameter step on the validation batch
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let alpha_var = tape.leaf(Tensor::vector(alpha.alpha.clone()));
        let (s_var, fv) = sample_policy_on_tape(&mut tape, alpha_var)?;
        let val_loss =
            soft_policy_loss(&mut tape, &val_batch, params, &vars, weights, s_var, &fv)?;
        let val_value = tape.value(val_loss).item();
        if !val_value.is_finite() {
            return Err(Error::SearchDiverged(outer));
        }
        let grads = tape.backward(val_loss)?;
        let alpha_grad = grads.get(alpha_var).cloned();
        let mut alpha_tensor = [Tensor::vector(alpha.alpha.clone())];
        alpha_adam.step(&mut alpha_tensor, &[alpha_grad], &["alpha".to_string()])?;
        alpha.alpha = alpha_tensor[0].data.clone();
        let outer_argmax = fv.first_fusion_layer();
        history.push(SearchHistoryRow {
            outer_step: outer,
            argmax: outer_argmax,
            soft: fv.soft.clone(),
            val_loss: val_value,
            argmax_mismatch: outer_argmax != last_inner_argmax,
        });
        // convergence: argmax unchanged for a full window of outer steps
        let current = argmax_tiebreak(&softmax(&alpha.alpha));
        if current == stable_argmax {
            stable_count += 1;
            if stable_count >= cfg.convergence_window {
                break;
            }
        } else {
            stable_argmax = current;
            stable_count = 1;
        }
    }
    Ok(alpha)
}

/// Weighted multi-task loss over a batch with the soft policy node mixed into
/// every layer.
fn soft_policy_loss(
    tape: &mut Tape,
    batch: &[Sample],
    params: &ModelParams,
    vars: &crate::model::ModelVars,
    weights: &TaskWeights,
    s_var: Var,
    fv: &FusionVector,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let task_type = params.cfg.task_type;
    let mut sums: [Option<Var>; 3] = [None, None, None];
    let mut counts = [0usize; 3];
    for sample in batch {
        let out = model_forward(
            tape,
            sample,
            params,
            vars,
            &PolicyInput::Soft {
                s: s_var,
                hard: &fv.s,
            },
        )?;
        let contributions = [
            (sample.present1 && weights.lambda1 > 0.0, out.logits_m1, 0),
            (sample.present2 && weights.lambda2 > 0.0, out.logits_m2, 1),
            (sample.both_present() && weights.lambda3 > 0.0, out.logits_joint, 2),
        ];
        for (active, logits, slot) in contributions {
            if active {
                let l = task_loss(tape, logits, &sample.label, task_type)?;
                counts[slot] += 1;
                sums[slot] = Some(match sums[slot] {
                    Some(acc) => tape.add(acc, l)?,
                    None => l,
                });
            }
        }
    }
    let lambdas = [weights.lambda1, weights.lambda2, weights.lambda3];
    let mut total: Option<Var> = None;
    for slot in 0..3 {
        if let Some(sum) = sums[slot] {
            let mean = tape.scale(sum, lambdas[slot] / counts[slot] as f64);
            total = Some(match total {
                Some(acc) => tape.add(acc, mean)?,
                None => mean,
            });
        }
    }
    total.ok_or(Error::EmptyBatch)
}

fn sample_batch(set: &[Sample], size: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.shuffle(rng);
    idx.iter()
        .take(size.min(set.len()))
        .map(|&i| set[i].clone())
        .collect()
}

/// Fresh initialization, then standard multi-task training with the fixed
/// fusion vector on the whole training set.
pub fn retrain_fixed(
    policy: &FusionVector,
    full_train_set: &[Sample],
    weights: &TaskWeights,
    settings: &TrainSettings,
    cfg: crate::model::ModelConfig,
    enc: crate::encoder::EncoderConfig,
) -> Result<(ModelParams, Vec<crate::train::LossReport>)> {
    assert!(
        policy.s.iter().any(|&b| b == 1),
        "fusion vector must have at least one fused layer"
    );
    let mut params = ModelParams::init(cfg, enc, settings.seed)?;
    let log = crate::train::train(
        &mut params,
        full_train_set,
        weights,
        &policy.s,
        false,
        settings,
    )?;
    Ok((params, log))
}
