//! Shared domain types: label spaces, label distributions, demonstrations,
//! episodes and prompt templates.

mod episode;
mod prompt;

pub use episode::{read_episodes_jsonl, write_episodes_jsonl, Episode, EpisodeRecord, QueryRecord};
pub use prompt::{assemble_prompt, AssembledPrompt, PromptTemplate};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative probability floor applied by [`normalize_over_labels`].
pub const FLOOR: f64 = 1e-8;

/// Tolerance on `sum(probs) == 1`.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("every label mass is zero; the backend returned no label tokens")]
    AllZeroMass,
    #[error("invalid label mass at index {index}: {value}")]
    InvalidMass { index: usize, value: f64 },
    #[error("label space needs at least two labels, got {0}")]
    TooFewLabels(usize),
    #[error("labels and verbalizer tokens differ in length ({labels} vs {tokens})")]
    VerbalizerLength { labels: usize, tokens: usize },
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("verbalizer first token {0:?} is shared by more than one label")]
    DuplicateFirstToken(String),
    #[error("verbalizer token for label {0} is empty")]
    EmptyToken(usize),
    #[error("label index {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("distribution does not sum to one (sum = {0})")]
    NotNormalized(f64),
    #[error("distribution has {got} entries, expected {expected}")]
    WrongLength { got: usize, expected: usize },
    #[error("template error: {0}")]
    Template(String),
}

/// Ordered label strings with their first-token verbalizers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    labels: Vec<String>,
    verbalizer_tokens: Vec<String>,
}

impl LabelSpace {
    pub fn new(labels: Vec<String>, verbalizer_tokens: Vec<String>) -> Result<Self, DomainError> {
        let space = LabelSpace { labels, verbalizer_tokens };
        validate_verbalizer(&space)?;
        Ok(space)
    }

    /// Label space whose verbalizer tokens are the labels themselves.
    pub fn from_labels<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self, DomainError> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let tokens = labels.clone();
        Self::new(labels, tokens)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn verbalizer_tokens(&self) -> &[String] {
        &self.verbalizer_tokens
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn check_label(&self, label: usize) -> Result<(), DomainError> {
        if label < self.num_classes() {
            Ok(())
        } else {
            Err(DomainError::LabelOutOfRange { label, classes: self.num_classes() })
        }
    }
}

/// Checks that a label space is usable with first-token probability reads.
pub fn validate_verbalizer(labels: &LabelSpace) -> Result<(), DomainError> {
    let c = labels.labels.len();
    if c < 2 {
        return Err(DomainError::TooFewLabels(c));
    }
    if labels.verbalizer_tokens.len() != c {
        return Err(DomainError::VerbalizerLength { labels: c, tokens: labels.verbalizer_tokens.len() });
    }
    for (i, label) in labels.labels.iter().enumerate() {
        if labels.labels[..i].contains(label) {
            return Err(DomainError::DuplicateLabel(label.clone()));
        }
    }
    for (i, token) in labels.verbalizer_tokens.iter().enumerate() {
        if token.is_empty() {
            return Err(DomainError::EmptyToken(i));
        }
        if labels.verbalizer_tokens[..i].contains(token) {
            return Err(DomainError::DuplicateFirstToken(token.clone()));
        }
    }
    Ok(())
}

/// Probability vector over the label space at one delimiter position.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    /// Wraps an already-normalized vector, checking the sum and sign invariants.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self, DomainError> {
        if probs.len() < 2 {
            return Err(DomainError::TooFewLabels(probs.len()));
        }
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(DomainError::InvalidMass { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(DomainError::NotNormalized(sum));
        }
        Ok(LabelDistribution { probs })
    }

    pub fn uniform(classes: usize) -> Self {
        LabelDistribution { probs: vec![1.0 / classes as f64; classes] }
    }

    /// Softmax over arbitrary finite logits.
    pub fn from_logits(logits: &[f64]) -> Self {
        LabelDistribution { probs: softmax(logits) }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, label: usize) -> f64 {
        self.probs[label]
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }

    pub fn argmax(&self) -> usize {
        argmax_label(self)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

impl<'de> Deserialize<'de> for LabelDistribution {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let probs = Vec::<f64>::deserialize(deserializer)?;
        LabelDistribution::from_probs(probs).map_err(serde::de::Error::custom)
    }
}

/// Restricts raw per-label masses to a distribution, applying the relative floor.
pub fn normalize_over_labels(raw: &[f64]) -> Result<LabelDistribution, DomainError> {
    if raw.len() < 2 {
        return Err(DomainError::TooFewLabels(raw.len()));
    }
    for (index, &value) in raw.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(DomainError::InvalidMass { index, value });
        }
    }
    let max = raw.iter().copied().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return Err(DomainError::AllZeroMass);
    }
    let floor = FLOOR * max;
    let floored: Vec<f64> = raw.iter().map(|&m| m.max(floor)).collect();
    let z: f64 = floored.iter().sum();
    Ok(LabelDistribution { probs: floored.into_iter().map(|m| m / z).collect() })
}

/// Index of the most probable label; ties go to the lowest index.
pub fn argmax_label(dist: &LabelDistribution) -> usize {
    argmax(dist.probs())
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// One (input, label) example. The label is absent for unlabeled queries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub text: String,
    pub label: Option<usize>,
}

impl Demonstration {
    pub fn labeled(text: impl Into<String>, label: usize) -> Self {
        Demonstration { text: text.into(), label: Some(label) }
    }

    pub fn unlabeled(text: impl Into<String>) -> Self {
        Demonstration { text: text.into(), label: None }
    }
}
