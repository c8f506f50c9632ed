//! Weighted multi-task loss over the three classification heads, the
//! availability-aware prediction rule, and the fixed-policy training loop.

use crate::data::{Label, Modality, Sample, TaskType};
use crate::error::{Error, Result};
use crate::model::{model_forward, ModelParams, PolicyInput};
use crate::optim::{AdamConfig, AdamState};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TaskWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl TaskWeights {
    pub fn joint_only() -> Self {
        TaskWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::InvalidConfig("task weights must be non-negative".into()));
        }
        if self.lambda1 + self.lambda2 + self.lambda3 <= 0.0 {
            return Err(Error::InvalidConfig("at least one task weight must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step loss bookkeeping. `total = λ1·loss_m1 + λ2·loss_m2 + λ3·loss_joint`;
/// a task with zero contributing samples contributes 0 with count 0.
#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub loss_m1: f64,
    pub loss_m2: f64,
    pub loss_joint: f64,
    pub total: f64,
    pub count_m1: usize,
    pub count_m2: usize,
    pub count_joint: usize,
}

impl LossReport {
    pub fn csv_header() -> &'static str {
        "step,loss_m1,loss_m2,loss_joint,total,count_m1,count_m2,count_joint"
    }

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.loss_m1, self.loss_m2, self.loss_joint, self.total,
            self.count_m1, self.count_m2, self.count_joint
        )
    }
}

/// Classification loss on one logit vector.
pub fn task_loss(tape: &mut Tape, logits: Var, label: &Label, task_type: TaskType) -> Result<Var> {
    let n = tape.value(logits).numel();
    match task_type {
        TaskType::Multiclass => {
            let c = label.as_class();
            tape.cross_entropy_logits(logits, c)
        }
        TaskType::Multilabel => {
            let bits = label.as_bits(n);
            tape.bce_with_logits(logits, &bits)
        }
        TaskType::Binary => {
            let c = label.as_class();
            if c > 1 {
                return Err(Error::LabelOutOfRange(format!("binary label {c}")));
            }
            if n != 1 {
                return Err(Error::InvalidConfig(
                    "binary task requires a single output logit".into(),
                ));
            }
            tape.bce_with_logits(logits, &[c as f64])
        }
    }
}

/// Weighted multi-task total over a batch on one tape. Per-task losses are
/// means over contributing samples. Under `FullAttention` (the baseline) the
/// joint task covers every sample with at least one modality; otherwise it
/// requires both.
pub fn total_loss(
    tape: &mut Tape,
    batch: &[Sample],
    params: &ModelParams,
    vars: &crate::model::ModelVars,
    weights: &TaskWeights,
    policy: &PolicyInput,
) -> Result<(Var, LossReport)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let baseline = matches!(policy, PolicyInput::FullAttention);
    let task_type = params.cfg.task_type;
    let mut sums: [Option<Var>; 3] = [None, None, None]; // m1, m2, joint
    let mut counts = [0usize; 3];
    let push = |tape: &mut Tape, slot: usize, loss: Var, sums: &mut [Option<Var>; 3], counts: &mut [usize; 3]| -> Result<()> {
        counts[slot] += 1;
        sums[slot] = Some(match sums[slot] {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
        Ok(())
    };
    for sample in batch {
        let out = model_forward(tape, sample, params, vars, policy)?;
        if baseline {
            if weights.lambda3 > 0.0 {
                let l = task_loss(tape, out.logits_joint, &sample.label, task_type)?;
                push(tape, 2, l, &mut sums, &mut counts)?;
            }
            continue;
        }
        if sample.present1 && weights.lambda1 > 0.0 {
            let l = task_loss(tape, out.logits_m1, &sample.label, task_type)?;
            push(tape, 0, l, &mut sums, &mut counts)?;
        }
        if sample.present2 && weights.lambda2 > 0.0 {
            let l = task_loss(tape, out.logits_m2, &sample.label, task_type)?;
            push(tape, 1, l, &mut sums, &mut counts)?;
        }
        if sample.both_present() && weights.lambda3 > 0.0 {
            let l = task_loss(tape, out.logits_joint, &sample.label, task_type)?;
            push(tape, 2, l, &mut sums, &mut counts)?;
        }
    }
    let lambdas = [weights.lambda1, weights.lambda2, weights.lambda3];
    let mut means = [0.0f64; 3];
    let mut total: Option<Var> = None;
    for slot in 0..3 {
        if let Some(sum) = sums[slot] {
            let mean = tape.scale(sum, 1.0 / counts[slot] as f64);
            means[slot] = tape.value(mean).item();
            let weighted = tape.scale(mean, lambdas[slot]);
            total = Some(match total {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let report = LossReport {
        loss_m1: means[0],
        loss_m2: means[1],
        loss_joint: means[2],
        total: tape.value(total).item(),
        count_m1: counts[0],
        count_m2: counts[1],
        count_joint: counts[2],
    };
    Ok((total, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChosenTask {
    Joint,
    M1Only,
    M2Only,
}

impl ChosenTask {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChosenTask::Joint => "joint",
            ChosenTask::M1Only => "m1_only",
            ChosenTask::M2Only => "m2_only",
        }
    }
}

/// Availability-aware head selection: joint when both modalities are present,
/// otherwise the surviving modality's head. The baseline always predicts with
/// the joint head.
pub fn predict(
    sample: &Sample,
    params: &ModelParams,
    policy_s: &[u8],
    baseline: bool,
) -> Result<(Vec<f64>, ChosenTask)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let input = if baseline {
        PolicyInput::FullAttention
    } else {
        PolicyInput::Hard(policy_s)
    };
    let out = model_forward(&mut tape, sample, params, &vars, &input)?;
    let (var, task) = if baseline || sample.both_present() {
        (out.logits_joint, ChosenTask::Joint)
    } else if sample.present1 {
        (out.logits_m1, ChosenTask::M1Only)
    } else {
        (out.logits_m2, ChosenTask::M2Only)
    };
    Ok((tape.value(var).data.clone(), task))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Training-time modality dropout: probability a sample loses one
    /// modality for the whole step (per-sample Bernoulli).
    #[serde(default)]
    pub modality_dropout: f64,
    #[serde(default = "default_dropout_target")]
    pub dropout_target: Modality,
}

fn default_dropout_target() -> Modality {
    Modality::M2
}

impl TrainSettings {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Fixed-policy multi-task training with Adam. Returns the per-step loss log.
pub fn train(
    params: &mut ModelParams,
    train_set: &[Sample],
    weights: &TaskWeights,
    policy_s: &[u8],
    baseline: bool,
    settings: &TrainSettings,
) -> Result<Vec<LossReport>> {
    if train_set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x7261_696e);
    let mut adam = AdamState::new(settings.adam(), &params.tensors);
    let mut log = Vec::new();
    for _epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(settings.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let mut s = train_set[i].clone();
                    if settings.modality_dropout > 0.0
                        && s.both_present()
                        && rng.random_bool(settings.modality_dropout)
                    {
                        match settings.dropout_target {
                            Modality::M1 => {
                                s.tokens1.clear();
                                s.present1 = false;
                            }
                            Modality::M2 => {
                                s.tokens2.clear();
                                s.present2 = false;
                            }
                        }
                    }
                    s
                })
                .collect();
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let input = if baseline {
                PolicyInput::FullAttention
            } else {
                PolicyInput::Hard(policy_s)
            };
            let (total, report) = total_loss(&mut tape, &batch, params, &vars, weights, &input)?;
            let grads = tape.backward(total)?;
            let grad_vec: Vec<Option<Tensor>> = vars
                .vars
                .iter()
                .map(|&v| grads.get(v).cloned())
                .collect();
            adam.step(&mut params.tensors, &grad_vec, &params.names)?;
            log.push(report);
        }
    }
    Ok(log)
}
