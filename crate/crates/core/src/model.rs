//! Pre-LN transformer encoder over the three-class-token sequence, driven by
//! a per-layer fusion flag that selects the composed attention mask.

use crate::data::{Sample, TaskType};
use crate::encoder::{embed_sample, EncoderConfig, EncoderVars, SequenceLayout};
use crate::error::{Error, Result};
use crate::mask::{compose_base, full_mask, verify_isolation, AttentionMask};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Layer count; also the length of the fusion policy vector.
    pub m_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_classes: usize,
    pub task_type: TaskType,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_layers == 0 {
            return Err(Error::InvalidConfig("m_layers must be >= 1".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// All trainable tensors, flat and named. Embedding tables live here too and
/// are updated jointly with the rest.
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub enc: EncoderConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

fn param_layout(cfg: &ModelConfig, enc: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = vec![
        ("emb.tok1".into(), vec![enc.vocab1, d]),
        ("emb.tok2".into(), vec![enc.vocab2, d]),
        ("emb.pos1".into(), vec![enc.max_len1, d]),
        ("emb.pos2".into(), vec![enc.max_len2, d]),
        ("emb.type".into(), vec![2, d]),
        ("cls.joint".into(), vec![1, d]),
        ("cls.m1".into(), vec![1, d]),
        ("cls.m2".into(), vec![1, d]),
    ];
    for l in 0..cfg.m_layers {
        for (suffix, shape) in [
            ("ln1.g", vec![d]),
            ("ln1.b", vec![d]),
            ("wq", vec![d, d]),
            ("bq", vec![d]),
            ("wk", vec![d, d]),
            ("bk", vec![d]),
            ("wv", vec![d, d]),
            ("bv", vec![d]),
            ("wo", vec![d, d]),
            ("bo", vec![d]),
            ("ln2.g", vec![d]),
            ("ln2.b", vec![d]),
            ("mlp.w1", vec![d, cfg.d_ff]),
            ("mlp.b1", vec![cfg.d_ff]),
            ("mlp.w2", vec![cfg.d_ff, d]),
            ("mlp.b2", vec![d]),
        ] {
            out.push((format!("layer{l}.{suffix}"), shape));
        }
    }
    out.push(("final_ln.g".into(), vec![d]));
    out.push(("final_ln.b".into(), vec![d]));
    for head in ["joint", "m1", "m2"] {
        out.push((format!("head.{head}.w"), vec![d, cfg.n_classes]));
        out.push((format!("head.{head}.b"), vec![cfg.n_classes]));
    }
    out
}

impl ModelParams {
    pub fn init(cfg: ModelConfig, enc: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if enc.d_model != cfg.d_model {
            return Err(Error::InvalidConfig(
                "encoder d_model must match model d_model".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in param_layout(&cfg, &enc) {
            let n: usize = shape.iter().product();
            let last = name.rsplit('.').next().unwrap_or("");
            let data = if last == "g" {
                vec![1.0; n] // LN gains
            } else if last.starts_with('b') {
                vec![0.0; n] // biases and LN shifts
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data));
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(ModelParams {
            cfg,
            enc,
            names,
            tensors,
            index,
        })
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.tensors[self.idx(name)]
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.idx(name);
        &mut self.tensors[i]
    }

    /// Static isolation safety net, run once after construction.
    pub fn verify_masks(&self) -> Result<()> {
        let layout = SequenceLayout::from_counts(self.enc.max_len1, self.enc.max_len2, true, true)?;
        verify_isolation(&layout, self.cfg.m_layers)
    }

    /// Register every parameter on a fresh tape, returning aligned vars.
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let vars: Vec<Var> = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        ModelVars { vars }
    }
}

/// Tape handles for one forward pass, aligned with `ModelParams::tensors`.
pub struct ModelVars {
    pub vars: Vec<Var>,
}

impl ModelVars {
    pub fn get(&self, params: &ModelParams, name: &str) -> Var {
        self.vars[params.idx(name)]
    }
}

/// How the per-layer fusion decision enters the forward pass.
pub enum PolicyInput<'a> {
    /// Fixed 0/1 fusion vector; masks are picked discretely.
    Hard(&'a [u8]),
    /// Straight-through policy on the tape: forward values equal `hard`,
    /// gradients flow to the policy parameters through `s`.
    Soft { s: Var, hard: &'a [u8] },
    /// Baseline: full attention among present positions, no task masks.
    FullAttention,
}

pub struct ForwardOutput {
    pub logits_joint: Var,
    pub logits_m1: Var,
    pub logits_m2: Var,
    pub layout: SequenceLayout,
}

fn mha_project(
    tape: &mut Tape,
    x: Var,
    w: Var,
    b: Var,
) -> Result<Var> {
    let p = tape.matmul(x, w)?;
    tape.broadcast_add_row(p, b)
}

/// Multi-head scaled dot-product attention under a boolean mask, up to and
/// including the output projection.
pub fn mha_forward(
    tape: &mut Tape,
    x: Var,
    mask: &AttentionMask,
    params: &ModelParams,
    vars: &ModelVars,
    layer: usize,
) -> Result<Var> {
    let q = mha_project(tape, x, vars.get(params, &format!("layer{layer}.wq")), vars.get(params, &format!("layer{layer}.bq")))?;
    let k = mha_project(tape, x, vars.get(params, &format!("layer{layer}.wk")), vars.get(params, &format!("layer{layer}.bk")))?;
    let v = mha_project(tape, x, vars.get(params, &format!("layer{layer}.wv")), vars.get(params, &format!("layer{layer}.bv")))?;
    let heads = attention_heads(tape, q, k, v, mask, &params.cfg)?;
    let concat = tape.concat_cols(&heads)?;
    mha_project(
        tape,
        concat,
        vars.get(params, &format!("layer{layer}.wo")),
        vars.get(params, &format!("layer{layer}.bo")),
    )
}

fn attention_heads(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &AttentionMask,
    cfg: &ModelConfig,
) -> Result<Vec<Var>> {
    let dh = cfg.d_model / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt)?;
        let scaled = tape.scale(logits, scale);
        let attn = tape.masked_softmax_rows(scaled, mask.as_slice())?;
        heads.push(tape.matmul(attn, vh)?);
    }
    Ok(heads)
}

fn layer_norm(
    tape: &mut Tape,
    x: Var,
    params: &ModelParams,
    vars: &ModelVars,
    prefix: &str,
) -> Result<Var> {
    tape.layer_norm_rows(
        x,
        vars.get(params, &format!("{prefix}.g")),
        vars.get(params, &format!("{prefix}.b")),
        LN_EPS,
    )
}

fn mlp(
    tape: &mut Tape,
    x: Var,
    params: &ModelParams,
    vars: &ModelVars,
    layer: usize,
) -> Result<Var> {
    let h = mha_project(tape, x, vars.get(params, &format!("layer{layer}.mlp.w1")), vars.get(params, &format!("layer{layer}.mlp.b1")))?;
    let a = tape.gelu(h);
    mha_project(
        tape,
        a,
        vars.get(params, &format!("layer{layer}.mlp.w2")),
        vars.get(params, &format!("layer{layer}.mlp.b2")),
    )
}

/// Full forward pass for one sample: three per-task logit vectors.
pub fn model_forward(
    tape: &mut Tape,
    sample: &Sample,
    params: &ModelParams,
    vars: &ModelVars,
    policy: &PolicyInput,
) -> Result<ForwardOutput> {
    let enc_vars = EncoderVars {
        tok1: vars.get(params, "emb.tok1"),
        tok2: vars.get(params, "emb.tok2"),
        pos1: vars.get(params, "emb.pos1"),
        pos2: vars.get(params, "emb.pos2"),
        type_table: vars.get(params, "emb.type"),
        cls_joint: vars.get(params, "cls.joint"),
        cls_m1: vars.get(params, "cls.m1"),
        cls_m2: vars.get(params, "cls.m2"),
    };
    let (mut x, layout) = embed_sample(tape, sample, &params.enc, &enc_vars)?;
    match policy {
        PolicyInput::Hard(s) | PolicyInput::Soft { hard: s, .. } => {
            assert_eq!(s.len(), params.cfg.m_layers, "policy length must equal depth");
        }
        PolicyInput::FullAttention => {}
    }
    for l in 0..params.cfg.m_layers {
        let normed = layer_norm(tape, x, params, vars, &format!("layer{l}.ln1"))?;
        let attn = match policy {
            PolicyInput::FullAttention => {
                let mask = full_mask(&layout);
                mha_forward(tape, normed, &mask, params, vars, l)?
            }
            PolicyInput::Hard(s) => {
                let mask = compose_base(s[l] == 1, &layout);
                mask.check_rows("compose")?;
                mha_forward(tape, normed, &mask, params, vars, l)?
            }
            PolicyInput::Soft { s, .. } => {
                // mix fused and pre-fusion branches by the straight-through
                // policy entry: hard 0/1 value, soft gradient
                let fused_mask = compose_base(true, &layout);
                let pre_mask = compose_base(false, &layout);
                let a_fused = mha_forward(tape, normed, &fused_mask, params, vars, l)?;
                let a_pre = mha_forward(tape, normed, &pre_mask, params, vars, l)?;
                let s_l = tape.slice_cols(*s, l, 1);
                let fused_part = tape.mul_scalar(a_fused, s_l)?;
                let neg = tape.scale(s_l, -1.0);
                let one_minus = tape.add_const(neg, 1.0);
                let pre_part = tape.mul_scalar(a_pre, one_minus)?;
                tape.add(fused_part, pre_part)?
            }
        };
        x = tape.add(x, attn)?;
        let normed2 = layer_norm(tape, x, params, vars, &format!("layer{l}.ln2"))?;
        let ff = mlp(tape, normed2, params, vars, l)?;
        x = tape.add(x, ff)?;
    }
    let x = layer_norm(tape, x, params, vars, "final_ln")?;
    let head = |tape: &mut Tape, row: usize, name: &str| -> Result<Var> {
        let emb = tape.slice_rows(x, row, 1);
        mha_project(
            tape,
            emb,
            vars.get(params, &format!("head.{name}.w")),
            vars.get(params, &format!("head.{name}.b")),
        )
    };
    Ok(ForwardOutput {
        logits_joint: head(tape, layout.cls_joint_idx, "joint")?,
        logits_m1: head(tape, layout.cls_m1_idx, "m1")?,
        logits_m2: head(tape, layout.cls_m2_idx, "m2")?,
        layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use crate::mask::AttentionMask;
    use crate::policy::sample_policy_on_tape;

    fn tiny_cfg(m_layers: usize, heads: usize, d_model: usize) -> (ModelConfig, EncoderConfig) {
        (
            ModelConfig {
                m_layers,
                heads,
                d_model,
                d_ff: 2 * d_model,
                n_classes: 3,
                task_type: TaskType::Multiclass,
            },
            EncoderConfig {
                d_model,
                vocab1: 5,
                vocab2: 7,
                max_len1: 3,
                max_len2: 2,
            },
        )
    }

    fn sample_both() -> Sample {
        Sample {
            tokens1: vec![0, 2, 4],
            tokens2: vec![1, 6],
            label: Label::Class(1),
            present1: true,
            present2: true,
        }
    }

    /// Plain-f64 multi-head attention, independent of the tape.
    fn naive_mha(
        x: &Tensor,
        params: &ModelParams,
        layer: usize,
        mask: &AttentionMask,
    ) -> Vec<f64> {
        let cfg = &params.cfg;
        let n = x.shape[0];
        let d = cfg.d_model;
        let proj = |w: &Tensor, b: &Tensor| -> Vec<f64> {
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    let mut acc = b.data[j];
                    for k in 0..d {
                        acc += x.data[i * d + k] * w.data[k * d + j];
                    }
                    out[i * d + j] = acc;
                }
            }
            out
        };
        let q = proj(
            params.tensor(&format!("layer{layer}.wq")),
            params.tensor(&format!("layer{layer}.bq")),
        );
        let k = proj(
            params.tensor(&format!("layer{layer}.wk")),
            params.tensor(&format!("layer{layer}.bk")),
        );
        let v = proj(
            params.tensor(&format!("layer{layer}.wv")),
            params.tensor(&format!("layer{layer}.bv")),
        );
        let dh = d / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = vec![0.0; n * d];
        for h in 0..cfg.heads {
            let col0 = h * dh;
            for i in 0..n {
                // attention logits for row i over allowed keys
                let mut weights = vec![f64::NEG_INFINITY; n];
                for j in 0..n {
                    if mask.get(i, j) {
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += q[i * d + col0 + c] * k[j * d + col0 + c];
                        }
                        weights[j] = dot * scale;
                    }
                }
                let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = weights
                    .iter()
                    .map(|&w| if w.is_finite() { (w - max).exp() } else { 0.0 })
                    .collect();
                let denom: f64 = exps.iter().sum();
                for c in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += exps[j] / denom * v[j * d + col0 + c];
                    }
                    concat[i * d + col0 + c] = acc;
                }
            }
        }
        let wo = params.tensor(&format!("layer{layer}.wo"));
        let bo = params.tensor(&format!("layer{layer}.bo"));
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let mut acc = bo.data[j];
                for k2 in 0..d {
                    acc += concat[i * d + k2] * wo.data[k2 * d + j];
                }
                out[i * d + j] = acc;
            }
        }
        out
    }

    #[test]
    fn mha_matches_naive_oracle_single_head() {
        let (cfg, enc) = tiny_cfg(1, 1, 4);
        let params = ModelParams::init(cfg, enc, 11).unwrap();
        let n = 3;
        let x = Tensor::matrix(
            n,
            4,
            vec![
                0.3, -0.1, 0.7, 0.2, -0.5, 0.4, 0.1, -0.2, 0.9, 0.0, -0.3, 0.6,
            ],
        );
        let mask = AttentionMask::new_all(n, true);
        let expect = naive_mha(&x, &params, 0, &mask);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let xv = tape.leaf(x);
        let got = mha_forward(&mut tape, xv, &mask, &params, &vars, 0).unwrap();
        let got = tape.value(got);
        for (a, b) in got.data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn mha_matches_naive_oracle_two_heads_masked() {
        let (cfg, enc) = tiny_cfg(1, 2, 8);
        let params = ModelParams::init(cfg, enc, 5).unwrap();
        let n = 4;
        let data: Vec<f64> = (0..n * 8).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect();
        let x = Tensor::matrix(n, 8, data);
        let mut mask = AttentionMask::new_all(n, false);
        // irregular but row-valid pattern
        for (q, ks) in [(0, vec![0, 2]), (1, vec![1]), (2, vec![0, 1, 2, 3]), (3, vec![3, 0])] {
            for k in ks {
                mask.set(q, k, true);
            }
        }
        let expect = naive_mha(&x, &params, 0, &mask);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let xv = tape.leaf(x);
        let got = mha_forward(&mut tape, xv, &mask, &params, &vars, 0).unwrap();
        let got = tape.value(got);
        for (a, b) in got.data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn init_follows_naming_rules_and_is_seeded() {
        let (cfg, enc) = tiny_cfg(2, 2, 8);
        let a = ModelParams::init(cfg.clone(), enc.clone(), 3).unwrap();
        let b = ModelParams::init(cfg.clone(), enc.clone(), 3).unwrap();
        let c = ModelParams::init(cfg, enc, 4).unwrap();
        for (name, t) in a.names.iter().zip(&a.tensors) {
            let last = name.rsplit('.').next().unwrap();
            if last == "g" {
                assert!(t.data.iter().all(|&v| v == 1.0), "{name} not ones");
            } else if last.starts_with('b') {
                assert!(t.data.iter().all(|&v| v == 0.0), "{name} not zeros");
            } else {
                assert!(t.data.iter().any(|&v| v != 0.0), "{name} all zero");
                assert!(t.data.iter().all(|&v| v.abs() < 0.2), "{name} too large for std 0.02");
            }
        }
        for (ta, tb) in a.tensors.iter().zip(&b.tensors) {
            assert_eq!(ta.data, tb.data);
        }
        assert!(a
            .tensors
            .iter()
            .zip(&c.tensors)
            .any(|(ta, tc)| ta.data != tc.data));
    }

    #[test]
    fn init_rejects_mismatched_dims() {
        let (cfg, mut enc) = tiny_cfg(1, 1, 4);
        enc.d_model = 8;
        assert!(ModelParams::init(cfg, enc, 0).is_err());
        let (mut cfg, enc) = tiny_cfg(1, 2, 4);
        cfg.d_model = 6; // not divisible by heads = 2 after the edit below
        cfg.heads = 4;
        let mut enc = enc;
        enc.d_model = 6;
        assert!(ModelParams::init(cfg, enc, 0).is_err());
    }

    #[test]
    fn verify_masks_passes_on_valid_layout() {
        let (cfg, enc) = tiny_cfg(3, 1, 4);
        let params = ModelParams::init(cfg, enc, 0).unwrap();
        params.verify_masks().unwrap();
    }

    #[test]
    fn forward_emits_one_logit_row_per_head() {
        let (cfg, enc) = tiny_cfg(2, 2, 8);
        let params = ModelParams::init(cfg, enc, 1).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let s = [0u8, 1u8];
        let out = model_forward(&mut tape, &sample_both(), &params, &vars, &PolicyInput::Hard(&s))
            .unwrap();
        for v in [out.logits_joint, out.logits_m1, out.logits_m2] {
            let t = tape.value(v);
            assert_eq!(t.shape, vec![1, 3]);
            assert!(t.data.iter().all(|x| x.is_finite()));
        }
        assert_eq!(out.layout.seq_len(), 3 + 3 + 2);
    }

    #[test]
    #[should_panic(expected = "policy length must equal depth")]
    fn forward_rejects_wrong_policy_length() {
        let (cfg, enc) = tiny_cfg(2, 1, 4);
        let params = ModelParams::init(cfg, enc, 1).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let s = [1u8]; // depth is 2
        let _ = model_forward(&mut tape, &sample_both(), &params, &vars, &PolicyInput::Hard(&s));
    }

    #[test]
    fn soft_forward_value_equals_hard_forward() {
        let (cfg, enc) = tiny_cfg(3, 1, 4);
        let params = ModelParams::init(cfg, enc, 9).unwrap();
        let sample = sample_both();
        for start in 0..3 {
            let hard: Vec<u8> = (0..3).map(|l| u8::from(l >= start)).collect();
            let mut tape_h = Tape::new();
            let vars_h = params.register(&mut tape_h);
            let out_h =
                model_forward(&mut tape_h, &sample, &params, &vars_h, &PolicyInput::Hard(&hard))
                    .unwrap();
            let want = tape_h.value(out_h.logits_joint).data.clone();

            let mut tape_s = Tape::new();
            let vars_s = params.register(&mut tape_s);
            let mut alpha = vec![0.0; 3];
            alpha[start] = 4.0; // argmax picks `start`
            let alpha_var = tape_s.leaf(Tensor::vector(alpha));
            let (s_var, fv) = sample_policy_on_tape(&mut tape_s, alpha_var).unwrap();
            assert_eq!(fv.s, hard);
            let out_s = model_forward(
                &mut tape_s,
                &sample,
                &params,
                &vars_s,
                &PolicyInput::Soft { s: s_var, hard: &fv.s },
            )
            .unwrap();
            let got = tape_s.value(out_s.logits_joint).data.clone();
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "start {start}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn absent_modality_does_not_change_surviving_head_under_masks() {
        // with task masks, the m1 head must be bit-identical whether or not
        // modality 2 is attached
        let (cfg, enc) = tiny_cfg(4, 2, 8);
        let params = ModelParams::init(cfg, enc, 21).unwrap();
        let s = [0u8, 0, 1, 1];
        let full = sample_both();
        let mut m1_only = full.clone();
        m1_only.tokens2.clear();
        m1_only.present2 = false;

        let mut tape_a = Tape::new();
        let vars_a = params.register(&mut tape_a);
        let out_a =
            model_forward(&mut tape_a, &full, &params, &vars_a, &PolicyInput::Hard(&s)).unwrap();
        let a = tape_a.value(out_a.logits_m1).data.clone();

        let mut tape_b = Tape::new();
        let vars_b = params.register(&mut tape_b);
        let out_b =
            model_forward(&mut tape_b, &m1_only, &params, &vars_b, &PolicyInput::Hard(&s)).unwrap();
        let b = tape_b.value(out_b.logits_m1).data.clone();
        assert_eq!(a, b, "m1 logits must not depend on modality-2 presence");
    }

    #[test]
    fn full_attention_couples_modalities() {
        // sanity check that the baseline really does let modality 2 reach the
        // joint token: removing it must change the joint logits
        let (cfg, enc) = tiny_cfg(2, 2, 8);
        let params = ModelParams::init(cfg, enc, 13).unwrap();
        let full = sample_both();
        let mut m1_only = full.clone();
        m1_only.tokens2.clear();
        m1_only.present2 = false;
        let run = |sample: &Sample| {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let out =
                model_forward(&mut tape, sample, &params, &vars, &PolicyInput::FullAttention)
                    .unwrap();
            tape.value(out.logits_joint).data.clone()
        };
        assert_ne!(run(&full), run(&m1_only));
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        use crate::train::{total_loss, TaskWeights};
        let (cfg, enc) = tiny_cfg(2, 2, 8);
        let mut params = ModelParams::init(cfg, enc, 17).unwrap();
        let batch = vec![sample_both(), {
            let mut s = sample_both();
            s.tokens2.clear();
            s.present2 = false;
            s.label = Label::Class(2);
            s
        }];
        let weights = TaskWeights::default();
        let s = [0u8, 1u8];
        let loss_at = |params: &ModelParams| -> f64 {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let (total, _) =
                total_loss(&mut tape, &batch, params, &vars, &weights, &PolicyInput::Hard(&s))
                    .unwrap();
            tape.value(total).item()
        };
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let (total, _) =
            total_loss(&mut tape, &batch, &params, &vars, &weights, &PolicyInput::Hard(&s))
                .unwrap();
        let grads = tape.backward(total).unwrap();
        let h = 1e-5;
        // spot-check a spread of parameters: one coordinate from each kind
        for (name, coord) in [
            ("layer0.wq", 3),
            ("layer1.wv", 10),
            ("layer0.mlp.w1", 7),
            ("layer1.ln1.g", 2),
            ("head.m1.w", 5),
            ("head.joint.b", 1),
            ("emb.tok1", 2 * 8 + 1), // token 2 is used by the sample
            ("cls.m2", 3),
        ] {
            let idx = params.idx(name);
            let analytic = grads
                .get(vars.vars[idx])
                .map(|g| g.data[coord])
                .unwrap_or(0.0);
            let orig = params.tensors[idx].data[coord];
            params.tensors[idx].data[coord] = orig + h;
            let up = loss_at(&params);
            params.tensors[idx].data[coord] = orig - h;
            let down = loss_at(&params);
            params.tensors[idx].data[coord] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1.0);
            assert!(
                (analytic - numeric).abs() / denom < 1e-4,
                "{name}[{coord}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}
