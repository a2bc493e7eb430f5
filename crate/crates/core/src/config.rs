//! Model and training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{FuxiError, Result};
use crate::baselines::VariantKind;

/// Two years in seconds.
pub const TWO_YEARS_SECS: u64 = 2 * 365 * 24 * 3600;

/// Architecture hyperparameters. Serialized keys follow the short names used
/// in config files (`d`, `d_h`, `b`, `n`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding width.
    #[serde(rename = "d")]
    pub dim: usize,
    /// Width of each attention head.
    #[serde(rename = "d_h")]
    pub head_dim: usize,
    pub heads_per_channel: usize,
    #[serde(rename = "d_ffn")]
    pub ffn_dim: usize,
    /// Number of stacked blocks.
    #[serde(rename = "b")]
    pub layers: usize,
    /// Maximum sequence length.
    #[serde(rename = "n")]
    pub max_len: usize,
    #[serde(rename = "n_b")]
    pub time_buckets: usize,
    pub negatives: usize,
    /// Rows of the item table, including the padding row 0.
    pub vocab: usize,
    /// Seconds per unit of timestamp difference before bucketing.
    pub time_bucket_base: f64,
    /// Differences at or beyond this many seconds land in the last bucket.
    pub max_time_span: u64,
    pub rms_eps: f64,
    pub variant: VariantKind,
    /// Hold the temporal-channel biases at zero (never updated).
    pub zero_temporal_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 50,
            head_dim: 50,
            heads_per_channel: 1,
            ffn_dim: 100,
            layers: 2,
            max_len: 200,
            time_buckets: 128,
            negatives: 128,
            vocab: 3707,
            time_bucket_base: 1.0,
            max_time_span: TWO_YEARS_SECS,
            rms_eps: 1e-6,
            variant: VariantKind::Full,
            zero_temporal_bias: false,
        }
    }
}

impl ModelConfig {
    /// Width of one channel's concatenated heads.
    pub fn channel_width(&self) -> usize {
        self.heads_per_channel * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("d", self.dim),
            ("d_h", self.head_dim),
            ("heads_per_channel", self.heads_per_channel),
            ("d_ffn", self.ffn_dim),
            ("n", self.max_len),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.time_buckets < 2 {
            problems.push("n_b must be at least 2".to_string());
        }
        if self.negatives < 1 {
            problems.push("negatives must be at least 1".to_string());
        }
        if self.vocab < 2 {
            problems.push("vocab must be at least 2".to_string());
        }
        if !(self.time_bucket_base > 0.0 && self.time_bucket_base.is_finite()) {
            problems.push("time_bucket_base must be positive".to_string());
        }
        if self.max_time_span == 0 {
            problems.push("max_time_span must be positive".to_string());
        }
        if !(self.rms_eps > 0.0) {
            problems.push("rms_eps must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(FuxiError::Config(problems.join("; ")))
        }
    }
}

/// Optimizer and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validate every this many epochs (0 disables validation).
    pub eval_every: usize,
    /// Stop after this many validations without improvement (0 disables).
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            epochs: 100,
            batch_size: 128,
            seed: 42,
            eval_every: 5,
            patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0) {
            problems.push("learning_rate must be positive");
        }
        if self.weight_decay < 0.0 {
            problems.push("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            problems.push("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            problems.push("adam_eps must be positive");
        }
        if self.batch_size < 1 {
            problems.push("batch_size must be at least 1");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(FuxiError::Config(problems.join("; ")))
        }
    }
}
