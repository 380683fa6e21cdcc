//! Model hyperparameters.

use crate::error::{Error, Result};
use crate::model::task::{TaskSpec, SEQ_LEN};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpKind {
    /// out = σ(x W_up) W_down
    Simple,
    /// out = (σ(x W_gate) ∘ (x W_in)) W_out
    Gated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub mlp_kind: MlpKind,
    pub seed: u64,
}

impl ModelConfig {
    /// Smallest config that still trains: for doctests and fast checks.
    pub fn tiny(task: &TaskSpec, seed: u64) -> Self {
        ModelConfig {
            n_layers: 1,
            d_model: 32,
            n_heads: 4,
            d_head: 8,
            d_mlp: 128,
            vocab_size: task.vocab_size(),
            max_seq_len: SEQ_LEN,
            mlp_kind: MlpKind::Simple,
            seed,
        }
    }

    /// Default toy scale: d_model 128, 4 heads, d_mlp 512.
    pub fn toy(task: &TaskSpec, n_layers: usize, seed: u64) -> Self {
        ModelConfig {
            n_layers,
            d_model: 128,
            n_heads: 4,
            d_head: 32,
            d_mlp: 512,
            vocab_size: task.vocab_size(),
            max_seq_len: SEQ_LEN,
            mlp_kind: MlpKind::Simple,
            seed,
        }
    }

    pub fn with_mlp(mut self, kind: MlpKind) -> Self {
        self.mlp_kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::InvalidConfig(format!(
                "d_model {} != n_heads {} × d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.n_layers == 0 || self.vocab_size == 0 || self.d_mlp == 0 || self.max_seq_len == 0 {
            return Err(Error::InvalidConfig("zero-sized dimension".into()));
        }
        Ok(())
    }

    /// Vocab must cover every token the task emits.
    pub fn check_task(&self, task: &TaskSpec) -> Result<()> {
        if task.vocab_size() > self.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "task {} needs vocab {}, model has {}",
                task.name(),
                task.vocab_size(),
                self.vocab_size
            )));
        }
        if SEQ_LEN > self.max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "prompt length {} exceeds max_seq_len {}",
                SEQ_LEN, self.max_seq_len
            )));
        }
        Ok(())
    }
}
