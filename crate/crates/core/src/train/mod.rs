//! Optimization loop.

mod negatives;
mod optimizer;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{batch_iterator, DatasetSplit, Example};
use crate::error::{FuxiError, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{hidden_states, ModelParams, SequenceBatch};
use crate::tensor::Tensor;

pub use negatives::sample_negatives;
pub use optimizer::AdamW;

/// Cutoff used for early stopping on the validation partition.
pub const SELECTION_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub positions: usize,
    pub validation: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the last epoch when
    /// validation is disabled).
    pub params: ModelParams<Tensor>,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub steps: u64,
}

/// Sampled-softmax loss over every position of `batch` that has a next item
/// inside its row. Returns the loss and the number of supervised positions,
/// or `None` when no row has two events.
pub fn sequence_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    batch: &SequenceBatch,
    params: &ModelParams<Var>,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<Option<(Var, usize)>> {
    let (bsz, t) = (batch.batch_size(), batch.width());
    let mut positions = Vec::new();
    let mut ids = Vec::new();
    for b in 0..bsz {
        for j in 0..batch.valid_len()[b].saturating_sub(1) {
            let target = batch.item(b, j + 1);
            positions.push(b * t + j);
            ids.push(target);
            ids.extend(sample_negatives(target, config.negatives, config.vocab, rng)?);
        }
    }
    if positions.is_empty() {
        return Ok(None);
    }
    let p = positions.len();
    let h = hidden_states(tape, batch, params, config)?;
    let h = tape.reshape(h, &[bsz * t, config.dim])?;
    let h = tape.gather_rows(h, Rc::new(positions))?;
    let scores = tape.gather_dot(h, params.item_embeddings, Rc::new(ids), 1 + config.negatives)?;
    let loss = tape.sampled_softmax_loss(scores, Rc::new(vec![1.0; p]))?;
    Ok(Some((loss, p)))
}

/// Copies the gradients of `vars` from the tape onto `params`.
pub fn collect_grads(tape: &Tape, vars: &ModelParams<Var>, params: &mut ModelParams<Tensor>) -> Result<()> {
    let mut handles = Vec::new();
    vars.for_each(|_, v| handles.push(*v));
    let mut idx = 0;
    let mut result = Ok(());
    params.for_each_mut(|_, t| {
        let g = tape.grad(handles[idx]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        idx += 1;
        if result.is_ok() {
            result = t.set_grad(g);
        }
    });
    result
}

fn frozen_names(config: &ModelConfig) -> impl Fn(&str) -> bool {
    let freeze_temporal = config.zero_temporal_bias;
    move |name: &str| freeze_temporal && name.ends_with(".temporal_bias")
}

pub fn train(split: &DatasetSplit, model: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(split, model, config, |_| {})
}

/// Trains from a fresh seeded initialization. Every `eval_every` epochs the
/// validation partition is scored; training stops after `patience`
/// evaluations without an NDCG@10 improvement and the best parameters are
/// returned.
pub fn train_with_progress(split: &DatasetSplit, model: &ModelConfig, config: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    model.validate()?;
    config.validate()?;
    if model.vocab < split.vocab() {
        return Err(FuxiError::Config(format!(
            "model vocab {} is smaller than the dataset's {}",
            model.vocab,
            split.vocab()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(model, &mut rng)?;
    let mut optimizer = AdamW::new(&params, config);
    let frozen = frozen_names(model);
    let examples: Vec<Example> = split.train.iter().filter(|e| e.items.len() >= 2).cloned().collect();
    let validate = config.eval_every > 0 && !split.validation.is_empty();

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams<Tensor>)> = None;
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        let shuffle = rng.gen::<u64>();
        let (mut total, mut count) = (0.0, 0usize);
        if !examples.is_empty() {
            for batch in batch_iterator(&examples, config.batch_size, model.max_len, Some(shuffle))? {
                let batch = batch?.batch.cropped();
                let mut tape = Tape::new();
                let vars = params.bind(&mut tape);
                let Some((loss, p)) = sequence_loss(&mut tape, &batch, &vars, model, &mut rng)? else {
                    continue;
                };
                let value = tape.value(loss).item()?;
                if !value.is_finite() {
                    return Err(FuxiError::NonFinite(format!(
                        "loss {value} at epoch {epoch}, step {}",
                        optimizer.steps() + 1
                    )));
                }
                tape.backward(loss)?;
                collect_grads(&tape, &vars, &mut params)?;
                optimizer.step(&mut params, &frozen);
                total += value * p as f64;
                count += p;
            }
        }
        let mean_loss = if count > 0 { total / count as f64 } else { f64::NAN };
        let validation = if validate && epoch % config.eval_every == 0 {
            Some(evaluate(&params, model, &split.validation, &[SELECTION_K], config.batch_size)?)
        } else {
            None
        };
        let log = EpochLog {
            epoch,
            mean_loss,
            positions: count,
            validation,
        };
        on_epoch(&log);
        let score = log.validation.as_ref().and_then(|r| r.ndcg_at(SELECTION_K));
        history.push(log);
        if let Some(score) = score {
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch, params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if config.patience > 0 && stale >= config.patience {
                    break;
                }
            }
        }
    }
    let steps = optimizer.steps();
    let last_epoch = history.len();
    let (params, best_epoch) = match best {
        Some((_, epoch, p)) => (p, epoch),
        None => (params, last_epoch),
    };
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
        steps,
    })
}
