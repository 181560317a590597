use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::reader::ReaderConfig;

/// Which data flows between retriever and reader are live during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "pipeline")]
    Pipeline,
    #[serde(rename = "e2e-fwd")]
    E2eRetrToRead,
    #[serde(rename = "e2e-rev")]
    E2eReadToRetr,
    #[serde(rename = "e2e-bi")]
    E2eBidirectional,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::Pipeline,
        TrainMode::E2eRetrToRead,
        TrainMode::E2eReadToRetr,
        TrainMode::E2eBidirectional,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TrainMode::Pipeline => "pipeline",
            TrainMode::E2eRetrToRead => "e2e-fwd",
            TrainMode::E2eReadToRetr => "e2e-rev",
            TrainMode::E2eBidirectional => "e2e-bi",
        }
    }

    /// Reader spans feed span queries back into retrieval.
    pub fn span_feedback(self) -> bool {
        matches!(self, TrainMode::E2eReadToRetr | TrainMode::E2eBidirectional)
    }

    /// Reader candidates are retrieved per step rather than once per epoch.
    pub fn live_candidates(self) -> bool {
        matches!(self, TrainMode::E2eRetrToRead | TrainMode::E2eBidirectional)
    }

    pub fn is_pipeline(self) -> bool {
        self == TrainMode::Pipeline
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}; expected pipeline, e2e-fwd, e2e-rev or e2e-bi")))
    }
}

/// Encoder dimensions shared by every encoder of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_len: 192,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub warmup_epochs: usize,
    pub main_epochs: usize,
    pub k: usize,
    pub batch_size: usize,
    pub retriever_lr: f64,
    pub reader_lr: f64,
    /// Fraction of each phase's steps spent in linear learning-rate warmup.
    pub lr_warmup_fraction: f64,
    pub clip_norm: Option<f64>,
    pub n_hard: usize,
    pub n_rand: usize,
    pub in_batch_negatives: bool,
    pub inject_gold: bool,
    /// Re-encode the knowledge base every this many epochs of a phase.
    pub refresh_every: usize,
    pub reader: ReaderConfig,
    pub seed: u64,
    pub eval_ks: Vec<usize>,
    /// Dev evaluation cadence in epochs of the scored phases; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Checkpoints kept on disk, newest first; 0 keeps all.
    pub keep_checkpoints: usize,
    pub max_skip_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::E2eBidirectional,
            warmup_epochs: 1,
            main_epochs: 10,
            k: 120,
            batch_size: 8,
            retriever_lr: 2e-6,
            reader_lr: 1e-5,
            lr_warmup_fraction: 0.1,
            clip_norm: Some(1.0),
            n_hard: 4,
            n_rand: 28,
            in_batch_negatives: false,
            inject_gold: true,
            refresh_every: 1,
            reader: ReaderConfig::default(),
            seed: 0,
            eval_ks: vec![1, 5, 10, 50, 100],
            eval_every: 1,
            keep_checkpoints: 2,
            max_skip_fraction: 0.01,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, reported together.
    pub fn problems(&self, n_entities: Option<usize>) -> Vec<String> {
        let mut p = Vec::new();
        if self.warmup_epochs == 0 && !self.mode.is_pipeline() {
            p.push("train.warmup_epochs must be at least 1".to_string());
        }
        if self.main_epochs == 0 {
            p.push("train.main_epochs must be positive".to_string());
        }
        if self.k == 0 {
            p.push("train.k must be positive".to_string());
        }
        if self.batch_size == 0 {
            p.push("train.batch_size must be positive".to_string());
        }
        for (name, lr) in [("retriever_lr", self.retriever_lr), ("reader_lr", self.reader_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                p.push(format!("train.{name} must be a positive number"));
            }
        }
        if !(0.0..=1.0).contains(&self.lr_warmup_fraction) {
            p.push("train.lr_warmup_fraction must lie in [0, 1]".to_string());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                p.push("train.clip_norm must be positive".to_string());
            }
        }
        if self.refresh_every == 0 {
            p.push("train.refresh_every must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.reader.thr) {
            p.push("train.reader.thr must lie in [0, 1)".to_string());
        }
        if self.reader.max_span_len == 0 {
            p.push("train.reader.max_span_len must be positive".to_string());
        }
        if self.eval_ks.iter().any(|&k| k == 0) {
            p.push("train.eval_ks entries must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.max_skip_fraction) {
            p.push("train.max_skip_fraction must lie in [0, 1]".to_string());
        }
        if let Some(n) = n_entities {
            if self.k > n {
                p.push(format!("train.k = {} exceeds the knowledge base size {n}", self.k));
            }
            if self.n_hard + self.n_rand >= n {
                p.push(format!(
                    "train.n_hard + train.n_rand = {} leaves no room for gold entities among {n}",
                    self.n_hard + self.n_rand
                ));
            }
        }
        p
    }

    pub fn validate(&self, n_entities: Option<usize>) -> Result<()> {
        let p = self.problems(n_entities);
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

pub fn model_problems(m: &ModelConfig) -> Vec<String> {
    let mut p = Vec::new();
    if m.dim == 0 || m.heads == 0 || m.dim % m.heads != 0 {
        p.push(format!("model.dim {} must be a positive multiple of model.heads {}", m.dim, m.heads));
    }
    if m.layers == 0 {
        p.push("model.layers must be positive".to_string());
    }
    if m.ffn_dim == 0 {
        p.push("model.ffn_dim must be positive".to_string());
    }
    if m.max_len < 4 {
        p.push("model.max_len must be at least 4".to_string());
    }
    p
}
