use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::tensor::DType;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub final_lr_frac: f64,
    /// Tokens per optimizer step; must be a multiple of `seq_len`.
    pub batch_tokens: usize,
    pub seq_len: usize,
    pub betas: [f64; 2],
    pub eps_adam: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Validation cadence in steps; `0` evaluates only at the end.
    pub eval_every: u64,
    pub eval_batches: usize,
    /// Checkpoint cadence in steps; `0` writes only the final checkpoint.
    pub checkpoint_every: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_path: Option<PathBuf>,
    /// Optional newline-delimited vocab; bytes are used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_path: Option<PathBuf>,
    /// Fraction of the corpus tail held out for validation, in `[0, 1)`.
    pub val_frac: f64,
    pub precision: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_lr: 2e-3,
            warmup_steps: 100,
            total_steps: 2000,
            final_lr_frac: 0.1,
            batch_tokens: 2048,
            seq_len: 128,
            betas: [0.9, 0.95],
            eps_adam: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 250,
            eval_batches: 4,
            checkpoint_every: 0,
            corpus_path: None,
            vocab_path: None,
            val_frac: 0.0005,
            precision: DType::F32,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.batch_tokens / self.seq_len.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if !(self.max_lr > 0.0) || !self.max_lr.is_finite() {
            return fail(format!("max_lr must be positive, got {}", self.max_lr));
        }
        if self.total_steps == 0 {
            return fail("total_steps must be positive".into());
        }
        if self.warmup_steps >= self.total_steps {
            return fail(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.final_lr_frac > 0.0 && self.final_lr_frac <= 1.0) {
            return fail(format!("final_lr_frac must be in (0, 1], got {}", self.final_lr_frac));
        }
        if self.seq_len == 0 || self.batch_tokens == 0 || self.batch_tokens % self.seq_len != 0 {
            return fail(format!(
                "batch_tokens ({}) must be a positive multiple of seq_len ({})",
                self.batch_tokens, self.seq_len
            ));
        }
        let [b1, b2] = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return fail(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(self.eps_adam > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return fail("eps_adam must be positive; weight_decay and grad_clip nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return fail(format!("val_frac must be in [0, 1), got {}", self.val_frac));
        }
        if self.seed > i64::MAX as u64 {
            return fail("seed must fit in a signed 64-bit integer".into());
        }
        Ok(())
    }
}

/// Contents of a run config file: a `[model]` and a `[train]` table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    /// Checks both tables and their agreement.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seq_len > self.model.max_seq_len {
            return Err(Error::config(format!(
                "train.seq_len ({}) exceeds model.max_seq_len ({})",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        Ok(())
    }
}
