use crate::autodiff::Tape;
use crate::config::ModelConfig;
use crate::error::{FuxiError, Result};
use crate::kernels::dot;
use crate::tensor::Tensor;

use super::batch::SequenceBatch;
use super::forward::hidden_states;
use super::params::ModelParams;

/// Scores of every item for the position after each row's last event:
/// `x^b[last]·Eᵀ`, one `vocab`-length vector per row. Entry 0 (padding) is
/// `-inf`.
pub fn score_last_positions(params: &ModelParams<Tensor>, batch: &SequenceBatch, config: &ModelConfig) -> Result<Vec<Vec<f64>>> {
    if let Some(b) = batch.valid_len().iter().position(|&l| l == 0) {
        return Err(FuxiError::invalid(format!("row {b} has no events to predict from")));
    }
    let batch = batch.cropped();
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape);
    let h = hidden_states(&mut tape, &batch, &vars, config)?;
    let hidden = tape.value(h).data();
    let table = &params.item_embeddings;
    let (t, d) = (batch.width(), config.dim);
    let mut out = Vec::with_capacity(batch.batch_size());
    for (b, &len) in batch.valid_len().iter().enumerate() {
        let row = &hidden[(b * t + len - 1) * d..(b * t + len) * d];
        let mut scores: Vec<f64> = (0..config.vocab).map(|id| dot(row, table.row(id))).collect();
        scores[0] = f64::NEG_INFINITY;
        out.push(scores);
    }
    Ok(out)
}

/// Top-`k` item ids per row by descending score; ties go to the smaller id
/// and the padding id is never returned.
pub fn predict_next(params: &ModelParams<Tensor>, batch: &SequenceBatch, config: &ModelConfig, k: usize) -> Result<Vec<Vec<usize>>> {
    let scores = score_last_positions(params, batch, config)?;
    Ok(scores.iter().map(|s| top_k(s, k)).collect())
}

pub(crate) fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (1..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}
