use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{batch_iterator, Example};
use crate::error::{FuxiError, Result};
use crate::model::{param_count, ModelParams};
use crate::train::{collect_grads, sequence_loss, AdamW};

/// Training passes timed by [`tps_benchmark`].
pub const TIMED_PASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsRecord {
    pub variant: String,
    pub seq_len: usize,
    pub samples: usize,
    pub seconds: f64,
    pub tps: f64,
}

/// `os-arch-threads`, attached to every benchmark row.
pub fn machine_tag() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{}-{}t", std::env::consts::OS, std::env::consts::ARCH, threads)
}

fn forward_backward(params: &ModelParams<crate::Tensor>, batch: &crate::model::SequenceBatch, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    if let Some((loss, _)) = sequence_loss(&mut tape, batch, &vars, config, rng)? {
        tape.backward(loss)?;
    }
    Ok(())
}

/// Training throughput per sequence length: after one untimed warm-up
/// batch, three full forward and backward passes over `dataset` are timed
/// and `TPS = 3·|dataset| / seconds`. Histories longer than a length keep
/// their most recent events.
pub fn tps_benchmark(config: &ModelConfig, seq_lengths: &[usize], batch_size: usize, dataset: &[Example], seed: u64) -> Result<Vec<TpsRecord>> {
    if batch_size == 0 || dataset.len() < batch_size {
        return Err(FuxiError::Data(format!(
            "benchmark needs at least one full batch ({batch_size} sequences), got {}",
            dataset.len()
        )));
    }
    let mut out = Vec::with_capacity(seq_lengths.len());
    for &len in seq_lengths {
        let cfg = ModelConfig {
            max_len: len,
            ..config.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&cfg, &mut rng)?;
        let batches = batch_iterator(dataset, batch_size, len, None)?
            .map(|b| b.map(|b| b.batch))
            .collect::<Result<Vec<_>>>()?;
        forward_backward(&params, &batches[0], &cfg, &mut rng)?;
        let mut samples = 0;
        let start = Instant::now();
        for _ in 0..TIMED_PASSES {
            for batch in &batches {
                forward_backward(&params, batch, &cfg, &mut rng)?;
                samples += batch.batch_size();
            }
        }
        let seconds = start.elapsed().as_secs_f64();
        out.push(TpsRecord {
            variant: cfg.variant.to_string(),
            seq_len: len,
            samples,
            seconds,
            tps: samples as f64 / seconds,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingAxis {
    Layers,
    Dim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub value: usize,
    pub param_count: usize,
    pub embedding_params: usize,
    pub block_params: usize,
    /// Median seconds for one forward, backward and optimizer step.
    pub step_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub axis: ScalingAxis,
    pub rows: Vec<ScalingRow>,
    /// Coefficient of determination of a least-squares line through
    /// `(value, step_seconds)`.
    pub r_squared: f64,
}

/// Least-squares `R²` of `y` against `x`.
pub fn linear_fit_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

/// Parameter counts and median step time as one axis of `template` varies.
pub fn scaling_probe(template: &ModelConfig, axis: ScalingAxis, values: &[usize], batch: &[Example], repeats: usize) -> Result<ScalingReport> {
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FuxiError::invalid("scaling values must be strictly ascending"));
    }
    if batch.is_empty() {
        return Err(FuxiError::Data("scaling probe needs at least one sequence".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let cfg = match axis {
            ScalingAxis::Layers => ModelConfig {
                layers: value,
                ..template.clone()
            },
            ScalingAxis::Dim => ModelConfig {
                dim: value,
                ..template.clone()
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ModelParams::init(&cfg, &mut rng)?;
        let mut opt = AdamW::new(&params, &TrainConfig::default());
        let seqs = batch_iterator(batch, batch.len(), cfg.max_len, None)?
            .next()
            .expect("one batch")?
            .batch
            .cropped();
        let mut times = Vec::with_capacity(repeats.max(1));
        for _ in 0..=repeats.max(1) {
            let start = Instant::now();
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            if let Some((loss, _)) = sequence_loss(&mut tape, &seqs, &vars, &cfg, &mut rng)? {
                tape.backward(loss)?;
                collect_grads(&tape, &vars, &mut params)?;
                opt.step(&mut params, |_| false);
            }
            times.push(start.elapsed().as_secs_f64());
        }
        times.remove(0);
        times.sort_by(f64::total_cmp);
        let embedding_params = (cfg.vocab + cfg.max_len) * cfg.dim;
        let total = param_count(&cfg);
        rows.push(ScalingRow {
            value,
            param_count: total,
            embedding_params,
            block_params: total - embedding_params,
            step_seconds: times[times.len() / 2],
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.value as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.step_seconds).collect();
    Ok(ScalingReport {
        axis,
        r_squared: linear_fit_r2(&x, &y),
        rows,
    })
}
