//! Seeded synthetic two-modality datasets with controllable modality
//! dominance, plus test-time missingness corruption.
//!
//! Token layout: ids `0..n_classes` are planted signal tokens (one per
//! class), everything above is uninformative background. In dominant mode the
//! weak modality additionally carries distractor noise: its background tokens
//! are drawn from the whole vocabulary, so class-token ids appear without
//! meaning and a single occurrence is not evidence. In xor mode each modality
//! carries one uniformly random half-signal and the label is their sum mod
//! `n_classes`, so neither modality alone beats chance.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Multilabel,
    Multiclass,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    /// Class index (multiclass and binary tasks).
    Class(usize),
    /// Per-class bits (multilabel tasks).
    Bits(Vec<u8>),
}

impl Label {
    pub fn as_class(&self) -> usize {
        match self {
            Label::Class(c) => *c,
            Label::Bits(_) => panic!("multilabel label used as class index"),
        }
    }

    pub fn as_bits(&self, n_classes: usize) -> Vec<f64> {
        match self {
            Label::Class(c) => {
                let mut v = vec![0.0; n_classes];
                v[*c] = 1.0;
                v
            }
            Label::Bits(b) => b.iter().map(|&x| f64::from(x)).collect(),
        }
    }
}

/// A two-modality labeled instance with per-modality availability flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens1: Vec<usize>,
    pub tokens2: Vec<usize>,
    pub label: Label,
    pub present1: bool,
    pub present2: bool,
}

impl Sample {
    pub fn both_present(&self) -> bool {
        self.present1 && self.present2
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub task_type: TaskType,
    pub n_samples: usize,
    pub len1: usize,
    pub len2: usize,
    pub vocab1: usize,
    pub vocab2: usize,
    /// Fraction of label information carried by modality 1 alone.
    pub dominance: f64,
    /// Label recoverable only from both modalities together.
    pub xor_mode: bool,
    pub label_noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Mimics a dataset with one dominant modality (MM-IMDb / Food-101 regime).
    pub fn dominant(seed: u64) -> Self {
        SyntheticSpec {
            n_classes: 4,
            task_type: TaskType::Multiclass,
            n_samples: 5000,
            len1: 6,
            len2: 8,
            vocab1: 32,
            vocab2: 32,
            dominance: 0.9,
            xor_mode: false,
            label_noise: 0.0,
            seed,
        }
    }

    /// Mimics a dataset where both modalities are required (Hateful Memes regime).
    pub fn balanced_xor(seed: u64) -> Self {
        SyntheticSpec {
            n_classes: 2,
            task_type: TaskType::Multiclass,
            n_samples: 3000,
            len1: 6,
            len2: 6,
            vocab1: 32,
            vocab2: 32,
            dominance: 0.5,
            xor_mode: true,
            label_noise: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidSpec("n_classes must be >= 2".into()));
        }
        if self.vocab1 <= self.n_classes || self.vocab2 <= self.n_classes {
            return Err(Error::InvalidSpec(
                "vocabularies must exceed n_classes (signal tokens + background)".into(),
            ));
        }
        if self.len1 == 0 || self.len2 == 0 || self.n_samples == 0 {
            return Err(Error::InvalidSpec("lengths and n_samples must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dominance) {
            return Err(Error::InvalidSpec("dominance must be in [0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::InvalidSpec("label_noise must be in [0,1)".into()));
        }
        if self.task_type == TaskType::Binary && self.n_classes != 2 {
            return Err(Error::InvalidSpec("binary task requires n_classes = 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    M1,
    M2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MissingnessSpec {
    /// Fraction of samples retaining the target modality.
    pub eta: f64,
    pub target_modality: Modality,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn plant(tokens: &mut [usize], signal: usize, rng: &mut ChaCha8Rng) {
    // at least one planted copy, roughly a quarter of the positions
    let count = (tokens.len() / 4).max(1);
    let mut positions: Vec<usize> = (0..tokens.len()).collect();
    positions.shuffle(rng);
    for &p in positions.iter().take(count) {
        tokens[p] = signal;
    }
}

fn background(len: usize, low: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(low..vocab)).collect()
}

fn make_label(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Label {
    match spec.task_type {
        TaskType::Multiclass | TaskType::Binary => {
            Label::Class(rng.random_range(0..spec.n_classes))
        }
        TaskType::Multilabel => {
            let mut bits: Vec<u8> = (0..spec.n_classes)
                .map(|_| u8::from(rng.random_bool(0.35)))
                .collect();
            if bits.iter().all(|&b| b == 0) {
                let c = rng.random_range(0..spec.n_classes);
                bits[c] = 1;
            }
            Label::Bits(bits)
        }
    }
}

fn active_classes(label: &Label) -> Vec<usize> {
    match label {
        Label::Class(c) => vec![*c],
        Label::Bits(b) => b
            .iter()
            .enumerate()
            .filter_map(|(i, &x)| (x == 1).then_some(i))
            .collect(),
    }
}

/// Deterministic generation with disjoint 70/15/15 train/val/test splits.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let mut tokens1 = background(spec.len1, spec.n_classes, spec.vocab1, &mut rng);
        // in dominant mode the weak modality is noisy: its background draws
        // from the whole vocabulary, so uninformative class tokens occur
        let low2 = if spec.xor_mode { spec.n_classes } else { 0 };
        let mut tokens2 = background(spec.len2, low2, spec.vocab2, &mut rng);
        let label;
        if spec.xor_mode {
            let a = rng.random_range(0..spec.n_classes);
            let b = rng.random_range(0..spec.n_classes);
            let y = (a + b) % spec.n_classes;
            plant(&mut tokens1, a, &mut rng);
            plant(&mut tokens2, b, &mut rng);
            label = match spec.task_type {
                TaskType::Multilabel => {
                    let mut bits = vec![0u8; spec.n_classes];
                    bits[y] = 1;
                    Label::Bits(bits)
                }
                _ => Label::Class(y),
            };
        } else {
            let true_label = make_label(spec, &mut rng);
            let in_m1 = rng.random_bool(spec.dominance);
            let in_m2 = rng.random_bool(1.0 - spec.dominance);
            for c in active_classes(&true_label) {
                if in_m1 {
                    plant(&mut tokens1, c, &mut rng);
                }
                if in_m2 {
                    plant(&mut tokens2, c, &mut rng);
                }
            }
            label = if spec.label_noise > 0.0 && rng.random_bool(spec.label_noise) {
                make_label(spec, &mut rng)
            } else {
                true_label
            };
        }
        samples.push(Sample {
            tokens1,
            tokens2,
            label,
            present1: true,
            present2: true,
        });
    }
    let mut order: Vec<usize> = (0..spec.n_samples).collect();
    order.shuffle(&mut rng);
    let n_train = spec.n_samples * 70 / 100;
    let n_val = spec.n_samples * 15 / 100;
    let pick = |range: &[usize]| -> Vec<Sample> {
        range.iter().map(|&i| samples[i].clone()).collect()
    };
    Ok(Dataset {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

/// Nearest integer, half away from zero.
pub fn round_half_away(x: f64) -> usize {
    (x.abs() + 0.5).floor() as usize
}

/// Exactly `round(eta * N)` samples keep the target modality; the rest lose
/// it (flag false, empty token range). The input set is unmodified.
pub fn apply_missingness(test_set: &[Sample], m: &MissingnessSpec) -> Vec<Sample> {
    let n = test_set.len();
    let keep = round_half_away(m.eta * n as f64).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
    order.shuffle(&mut rng);
    let mut keeps = vec![false; n];
    for &i in order.iter().take(keep) {
        keeps[i] = true;
    }
    test_set
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut s = s.clone();
            if !keeps[i] {
                match m.target_modality {
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
        .collect()
}

// ---- line-delimited serialization: label;tokens1;tokens2;flags ----

fn label_to_field(label: &Label) -> String {
    match label {
        Label::Class(c) => c.to_string(),
        Label::Bits(b) => {
            let mut s = String::new();
            for (i, x) in b.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{x}");
            }
            s
        }
    }
}

fn tokens_to_field(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn sample_to_line(s: &Sample) -> String {
    format!(
        "{};{};{};{} {}",
        label_to_field(&s.label),
        tokens_to_field(&s.tokens1),
        tokens_to_field(&s.tokens2),
        u8::from(s.present1),
        u8::from(s.present2),
    )
}

pub fn sample_from_line(line: &str) -> Result<Sample> {
    let parts: Vec<&str> = line.split(';').collect();
    if parts.len() != 4 {
        return Err(Error::InvalidSpec(format!(
            "expected 4 ;-separated fields, got {}",
            parts.len()
        )));
    }
    let label = if parts[0].contains(',') {
        let bits = parts[0]
            .split(',')
            .map(|b| b.parse::<u8>().map_err(|e| Error::InvalidSpec(e.to_string())))
            .collect::<Result<Vec<u8>>>()?;
        Label::Bits(bits)
    } else {
        Label::Class(
            parts[0]
                .parse()
                .map_err(|e: std::num::ParseIntError| Error::InvalidSpec(e.to_string()))?,
        )
    };
    let parse_tokens = |f: &str| -> Result<Vec<usize>> {
        if f.trim().is_empty() {
            return Ok(Vec::new());
        }
        f.split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| Error::InvalidSpec(e.to_string())))
            .collect()
    };
    let flags: Vec<&str> = parts[3].split_whitespace().collect();
    if flags.len() != 2 {
        return Err(Error::InvalidSpec("expected two availability flags".into()));
    }
    Ok(Sample {
        tokens1: parse_tokens(parts[1])?,
        tokens2: parse_tokens(parts[2])?,
        label,
        present1: flags[0] == "1",
        present2: flags[1] == "1",
    })
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&sample_to_line(s));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(sample_from_line)
        .collect()
}
