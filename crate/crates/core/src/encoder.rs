//! Turns a [`Sample`] into the concatenated token-embedding sequence:
//! three class tokens, then modality-1 tokens, then modality-2 tokens.
//! Each modality token embedding is lookup + position + modality-type
//! embedding. Class tokens receive no position or type embedding. An absent
//! modality contributes zero tokens but keeps its class token.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub vocab1: usize,
    pub vocab2: usize,
    pub max_len1: usize,
    pub max_len2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosKind {
    ClsJoint,
    ClsM1,
    ClsM2,
    M1,
    M2,
}

/// Index map of the concatenated sequence. Every attention mask is a pure
/// function of this layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub cls_joint_idx: usize,
    pub cls_m1_idx: usize,
    pub cls_m2_idx: usize,
    pub m1_range: Range<usize>,
    pub m2_range: Range<usize>,
    pub present1: bool,
    pub present2: bool,
}

impl SequenceLayout {
    pub fn from_counts(n1: usize, n2: usize, present1: bool, present2: bool) -> Result<Self> {
        if !present1 && !present2 {
            return Err(Error::NoModality);
        }
        debug_assert!(present1 || n1 == 0);
        debug_assert!(present2 || n2 == 0);
        let m1_start = 3;
        let m1_end = m1_start + if present1 { n1 } else { 0 };
        let m2_end = m1_end + if present2 { n2 } else { 0 };
        Ok(SequenceLayout {
            cls_joint_idx: 0,
            cls_m1_idx: 1,
            cls_m2_idx: 2,
            m1_range: m1_start..m1_end,
            m2_range: m1_end..m2_end,
            present1,
            present2,
        })
    }

    pub fn from_sample(sample: &Sample) -> Result<Self> {
        SequenceLayout::from_counts(
            sample.tokens1.len(),
            sample.tokens2.len(),
            sample.present1,
            sample.present2,
        )
    }

    pub fn seq_len(&self) -> usize {
        self.m2_range.end
    }

    /// Every index maps to exactly one kind.
    pub fn classify(&self, idx: usize) -> PosKind {
        if idx == self.cls_joint_idx {
            PosKind::ClsJoint
        } else if idx == self.cls_m1_idx {
            PosKind::ClsM1
        } else if idx == self.cls_m2_idx {
            PosKind::ClsM2
        } else if self.m1_range.contains(&idx) {
            PosKind::M1
        } else if self.m2_range.contains(&idx) {
            PosKind::M2
        } else {
            panic!("index {idx} out of sequence of length {}", self.seq_len())
        }
    }
}

/// Tape handles for all embedding-side parameters of one forward pass.
pub struct EncoderVars {
    pub tok1: Var,
    pub tok2: Var,
    pub pos1: Var,
    pub pos2: Var,
    /// 2 x d_model; row 0 = modality-1 type, row 1 = modality-2 type.
    pub type_table: Var,
    pub cls_joint: Var,
    pub cls_m1: Var,
    pub cls_m2: Var,
}

/// Builds the S x d_model input sequence and its layout.
pub fn embed_sample(
    tape: &mut Tape,
    sample: &Sample,
    cfg: &EncoderConfig,
    vars: &EncoderVars,
) -> Result<(Var, SequenceLayout)> {
    let layout = SequenceLayout::from_sample(sample)?;
    if sample.present1 && sample.tokens1.len() > cfg.max_len1 {
        return Err(Error::InvalidSpec(format!(
            "modality-1 sequence of {} exceeds max_len1 {}",
            sample.tokens1.len(),
            cfg.max_len1
        )));
    }
    if sample.present2 && sample.tokens2.len() > cfg.max_len2 {
        return Err(Error::InvalidSpec(format!(
            "modality-2 sequence of {} exceeds max_len2 {}",
            sample.tokens2.len(),
            cfg.max_len2
        )));
    }
    let mut parts = vec![vars.cls_joint, vars.cls_m1, vars.cls_m2];
    if sample.present1 && !sample.tokens1.is_empty() {
        parts.push(modality_block(
            tape,
            &sample.tokens1,
            vars.tok1,
            vars.pos1,
            vars.type_table,
            0,
        )?);
    }
    if sample.present2 && !sample.tokens2.is_empty() {
        parts.push(modality_block(
            tape,
            &sample.tokens2,
            vars.tok2,
            vars.pos2,
            vars.type_table,
            1,
        )?);
    }
    let seq = tape.concat_rows(&parts)?;
    debug_assert_eq!(tape.value(seq).dims2().0, layout.seq_len());
    Ok((seq, layout))
}

fn modality_block(
    tape: &mut Tape,
    tokens: &[usize],
    tok_table: Var,
    pos_table: Var,
    type_table: Var,
    type_id: usize,
) -> Result<Var> {
    let looked = tape.gather_rows(tok_table, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = tape.gather_rows(pos_table, &positions)?;
    let types = tape.gather_rows(type_table, &vec![type_id; tokens.len()])?;
    let sum = tape.add(looked, pos)?;
    tape.add(sum, types)
}
