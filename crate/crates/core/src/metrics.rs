//! Full-catalog ranking metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{batch_iterator, Example};
use crate::error::{FuxiError, Result};
use crate::model::{score_last_positions, ModelParams};
use crate::tensor::Tensor;

/// 1-based rank of `target`: one plus the number of other non-excluded items
/// scoring at least as high. Ties count against the target.
pub fn rank_of_target(logits: &[f64], target: usize, excluded: &[usize]) -> Result<usize> {
    let score = *logits
        .get(target)
        .ok_or_else(|| FuxiError::IdOutOfRange { id: target, vocab: logits.len() })?;
    if excluded.contains(&target) {
        return Err(FuxiError::invalid(format!("target {target} is excluded from ranking")));
    }
    if score.is_nan() {
        return Err(FuxiError::NonFinite(format!("target {target} has a NaN score")));
    }
    let better = logits
        .iter()
        .enumerate()
        .filter(|&(id, &s)| id != target && s >= score && !excluded.contains(&id))
        .count();
    Ok(better + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub users: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub ranks: Vec<usize>,
}

impl MetricsReport {
    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.hr.get(&k).copied()
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ndcg.get(&k).copied()
    }

    /// `(k, metric, value)` rows in a fixed order: HR and NDCG per K, then MRR
    /// with `k = 0`.
    pub fn rows(&self) -> Vec<(usize, &'static str, f64)> {
        let mut out = Vec::new();
        for (&k, &v) in &self.hr {
            out.push((k, "hr", v));
        }
        for (&k, &v) in &self.ndcg {
            out.push((k, "ndcg", v));
        }
        out.push((0, "mrr", self.mrr));
        out
    }
}

pub fn compute_metrics(ranks: &[usize], ks: &[usize]) -> Result<MetricsReport> {
    if ranks.is_empty() {
        return Err(FuxiError::invalid("no ranks to aggregate"));
    }
    if ranks.contains(&0) {
        return Err(FuxiError::invalid("ranks are 1-based"));
    }
    let n = ranks.len() as f64;
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        let hits = ranks.iter().filter(|&&r| r <= k).count();
        let gain: f64 = ranks.iter().filter(|&&r| r <= k).map(|&r| 1.0 / ((r + 1) as f64).log2()).sum();
        hr.insert(k, hits as f64 / n);
        ndcg.insert(k, gain / n);
    }
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    Ok(MetricsReport {
        hr,
        ndcg,
        mrr,
        users: ranks.len(),
        ranks: ranks.to_vec(),
    })
}

/// Ranks each example's target against every non-padding item using the
/// scores at the last history position.
pub fn evaluate(params: &ModelParams<Tensor>, config: &ModelConfig, partition: &[Example], ks: &[usize], batch_size: usize) -> Result<MetricsReport> {
    let mut ranks = Vec::with_capacity(partition.len());
    for batch in batch_iterator(partition, batch_size, config.max_len, None)? {
        let batch = batch?;
        let scores = score_last_positions(params, &batch.batch, config)?;
        for (row, target) in scores.iter().zip(&batch.targets) {
            let target = target.ok_or_else(|| FuxiError::invalid("evaluation example without a target"))?;
            ranks.push(rank_of_target(row, target, &[0])?);
        }
    }
    compute_metrics(&ranks, ks)
}

/// One evaluation result line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub variant: String,
    pub epoch: usize,
    pub k: usize,
    pub metric: String,
    pub value: f64,
}

pub fn records(variant: &str, epoch: usize, report: &MetricsReport) -> Vec<MetricRecord> {
    report
        .rows()
        .into_iter()
        .map(|(k, metric, value)| MetricRecord {
            variant: variant.to_string(),
            epoch,
            k,
            metric: metric.to_string(),
            value,
        })
        .collect()
}

pub fn write_csv(path: &Path, rows: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| FuxiError::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| FuxiError::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| FuxiError::io(path, e))
}

pub fn write_jsonl(path: &Path, rows: &[MetricRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| FuxiError::io(path, e))?);
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| FuxiError::Data(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| FuxiError::io(path, e))?;
    }
    f.flush().map_err(|e| FuxiError::io(path, e))
}
