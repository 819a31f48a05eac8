//! Desk-scale causal-LM pretraining: byte-level data ingestion, AdamW
//! with warmup + cosine decay, deterministic training loop, perplexity
//! evaluation, and binary checkpoints.

pub mod checkpoint;
pub mod corpus;
pub mod optim;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, RngState};
pub use corpus::{ingest_corpus, TokenStream};
pub use optim::{adamw_step, clip_global_norm, lr_at, AdamState};
pub use trainer::{
    evaluate_loss, evaluate_perplexity, train, EvalRecord, LogEvent, TrainLogRecord, TrainReport,
};

use std::path::PathBuf;

/// Learning-rate schedule. Cosine decays from the peak to zero over
/// the post-warmup steps; `cycles = 0.5` is a half cosine period.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Cosine { cycles: f64 },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Cosine { cycles: 0.5 }
    }
}

/// Training hyperparameters. Defaults are the pre-training recipe
/// scaled down to desk size: batch 16 x 256 tokens for 2000 steps with
/// 100 warmup steps standing in for 256 x 2048 x 120000 / 2000.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_steps: usize,
    /// Mini-batch size in sequences.
    pub batch_size: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub corpus_path: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 2000,
            batch_size: 16,
            seq_len: 256,
            peak_lr: 4e-4,
            warmup_steps: 100,
            schedule: Schedule::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.9999,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            grad_clip_norm: 1.0,
            seed: 0,
            eval_every: 500,
            corpus_path: PathBuf::from("crates/core/assets/corpus.txt"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.warmup_steps > self.max_steps {
            return Err(crate::Error::InvalidConfig(format!(
                "warmup_steps {} exceeds max_steps {}",
                self.warmup_steps, self.max_steps
            )));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(crate::Error::InvalidConfig(
                "batch_size and seq_len must be positive".into(),
            ));
        }
        Ok(())
    }
}
