//! Boolean attention masks over a [`SequenceLayout`].
//!
//! Masks depend only on the layout (and the per-layer fusion flag), never on
//! token values. The composed multi-task mask keeps each modality's token
//! stream pure at every layer: modality tokens and the per-modality class
//! tokens attend only within their own modality block, and the joint class
//! token is the sole cross-modal mixing point, opening up at fused layers.
//! This makes the transitive closure of attention from a per-modality class
//! token exclude the other modality under every fusion policy, which is what
//! the isolation guarantee requires.

use crate::encoder::SequenceLayout;
use crate::error::{Error, Result};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub size: usize,
    allowed: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsTask {
    M1Only,
    M2Only,
}

impl AttentionMask {
    pub fn new_all(size: usize, value: bool) -> Self {
        AttentionMask {
            size,
            allowed: vec![value; size * size],
        }
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.size + k]
    }

    pub fn set(&mut self, q: usize, k: usize, v: bool) {
        self.allowed[q * self.size + k] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// Intersect with another mask of the same size.
    pub fn intersect(&mut self, other: &AttentionMask) {
        assert_eq!(self.size, other.size);
        for (a, b) in self.allowed.iter_mut().zip(&other.allowed) {
            *a = *a && *b;
        }
    }

    /// Every query row must keep at least one attendable key.
    pub fn check_rows(&self, op: &'static str) -> Result<()> {
        for q in 0..self.size {
            if !(0..self.size).any(|k| self.get(q, k)) {
                return Err(Error::FullyMaskedRow { op, row: q });
            }
        }
        Ok(())
    }

    /// 0/1 text grid, one row per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for q in 0..self.size {
            for k in 0..self.size {
                out.push(if self.get(q, k) { '1' } else { '0' });
                if k + 1 < self.size {
                    out.push(' ');
                }
            }
            let _ = writeln!(out);
        }
        out
    }
}

/// Fig-style "original attention": everything attends everything among
/// present positions.
pub fn full_mask(layout: &SequenceLayout) -> AttentionMask {
    AttentionMask::new_all(layout.seq_len(), true)
}

fn allow_row(mask: &mut AttentionMask, q: usize, keys: impl IntoIterator<Item = usize>) {
    for k in keys {
        mask.set(q, k, true);
    }
}

/// Cross-modal token-token attention blocked; each modality block (tokens
/// plus its class token) attends only itself. The joint class token attends
/// only itself: before the fusion layer no cross-modal information may flow,
/// including through the joint token.
pub fn cross_modal_block_mask(layout: &SequenceLayout) -> AttentionMask {
    let mut mask = AttentionMask::new_all(layout.seq_len(), false);
    mask.set(layout.cls_joint_idx, layout.cls_joint_idx, true);
    allow_row(
        &mut mask,
        layout.cls_m1_idx,
        std::iter::once(layout.cls_m1_idx).chain(layout.m1_range.clone()),
    );
    allow_row(
        &mut mask,
        layout.cls_m2_idx,
        std::iter::once(layout.cls_m2_idx).chain(layout.m2_range.clone()),
    );
    for q in layout.m1_range.clone() {
        allow_row(
            &mut mask,
            q,
            std::iter::once(layout.cls_m1_idx).chain(layout.m1_range.clone()),
        );
    }
    for q in layout.m2_range.clone() {
        allow_row(
            &mut mask,
            q,
            std::iter::once(layout.cls_m2_idx).chain(layout.m2_range.clone()),
        );
    }
    mask
}

/// Per-task restriction: the task's class-token row attends only itself and
/// its own modality tokens, and no other-modality row may attend that class
/// token's column.
pub fn task_cls_mask(layout: &SequenceLayout, task: ClsTask) -> AttentionMask {
    let mut mask = full_mask(layout);
    let (cls, own_range, other_cls, other_range) = match task {
        ClsTask::M1Only => (
            layout.cls_m1_idx,
            layout.m1_range.clone(),
            layout.cls_m2_idx,
            layout.m2_range.clone(),
        ),
        ClsTask::M2Only => (
            layout.cls_m2_idx,
            layout.m2_range.clone(),
            layout.cls_m1_idx,
            layout.m1_range.clone(),
        ),
    };
    for k in 0..layout.seq_len() {
        mask.set(cls, k, k == cls || own_range.contains(&k));
    }
    for q in other_range {
        mask.set(q, cls, false);
    }
    mask.set(other_cls, cls, false);
    mask
}

/// The per-layer mask of the three-token multi-task forward pass.
///
/// Rules (documented here; the rule-enumeration tests mirror them):
/// - modality-1 token rows attend `{cls_m1} ∪ m1_range`; modality 2 likewise;
/// - the `cls_m1` row attends `{cls_m1} ∪ m1_range` (self only when the
///   modality is absent); `cls_m2` likewise;
/// - the `cls_joint` row attends every present position at a fused layer
///   (`policy_s[layer] = 1`) and only itself before fusion.
pub fn compose(
    layer_index: usize,
    policy_s: &[u8],
    layout: &SequenceLayout,
) -> Result<AttentionMask> {
    let fused = policy_s[layer_index] == 1;
    let mask = compose_base(fused, layout);
    mask.check_rows("compose")?;
    Ok(mask)
}

/// Same as [`compose`] but keyed directly on the layer's fusion flag.
pub fn compose_base(fused: bool, layout: &SequenceLayout) -> AttentionMask {
    let mut mask = cross_modal_block_mask(layout);
    if fused {
        for k in 0..layout.seq_len() {
            mask.set(layout.cls_joint_idx, k, true);
        }
    }
    mask
}

/// Positions whose layer-0 input can influence `start`'s final embedding,
/// given the per-layer masks in order. Influence propagates through attention
/// edges and the residual stream.
pub fn reachable_inputs(masks: &[AttentionMask], start: usize) -> Vec<bool> {
    let size = masks.first().map_or(0, |m| m.size);
    let mut reach = vec![false; size];
    if size == 0 {
        return reach;
    }
    reach[start] = true;
    for mask in masks.iter().rev() {
        let snapshot = reach.clone();
        for q in 0..size {
            if snapshot[q] {
                for k in 0..size {
                    if mask.get(q, k) {
                        reach[k] = true;
                    }
                }
            }
        }
    }
    reach
}

/// Static isolation proof: under every suffix-ones policy, the transitive
/// closure of attention from each per-modality class token must exclude the
/// other modality's positions and class token.
pub fn verify_isolation(layout: &SequenceLayout, depth: usize) -> Result<()> {
    for first_fusion in 0..depth {
        let policy: Vec<u8> = (0..depth).map(|l| u8::from(l >= first_fusion)).collect();
        let masks: Vec<AttentionMask> = (0..depth)
            .map(|l| compose(l, &policy, layout))
            .collect::<Result<Vec<_>>>()?;
        for (cls, forbidden_cls, forbidden) in [
            (layout.cls_m1_idx, layout.cls_m2_idx, layout.m2_range.clone()),
            (layout.cls_m2_idx, layout.cls_m1_idx, layout.m1_range.clone()),
        ] {
            let reach = reachable_inputs(&masks, cls);
            if reach[forbidden_cls] || forbidden.clone().any(|p| reach[p]) {
                return Err(Error::InvalidConfig(format!(
                    "isolation violated: class token {cls} can reach the other modality \
                     under policy starting at layer {first_fusion}"
                )));
            }
        }
    }
    Ok(())
}
