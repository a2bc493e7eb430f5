use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FuxiError, Result};
use crate::model::SequenceBatch;

use super::split::Example;

/// A padded batch plus the per-row targets and the partition indices it
/// was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub batch: SequenceBatch,
    pub targets: Vec<Option<usize>>,
    pub members: Vec<usize>,
}

pub struct BatchIter<'a> {
    partition: &'a [Example],
    order: Vec<usize>,
    batch_size: usize,
    width: usize,
    cursor: usize,
}

/// Visits every example of `partition` once, in a seeded shuffled order
/// (`Some(seed)`) or in partition order (`None`). Rows are padded to width
/// `n`; longer histories keep their most recent `n` events.
pub fn batch_iterator(partition: &[Example], batch_size: usize, n: usize, shuffle_seed: Option<u64>) -> Result<BatchIter<'_>> {
    if batch_size < 1 {
        return Err(FuxiError::invalid("batch_size must be at least 1"));
    }
    if partition.is_empty() {
        return Err(FuxiError::Data("cannot batch an empty partition".into()));
    }
    let mut order: Vec<usize> = (0..partition.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIter {
        partition,
        order,
        batch_size,
        width: n,
        cursor: 0,
    })
}

impl Iterator for BatchIter<'_> {
    type Item = Result<LabeledBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let members = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let rows = members.iter().map(|&i| {
            let e = &self.partition[i];
            (e.items.as_slice(), e.timestamps.as_slice())
        });
        Some(SequenceBatch::from_histories(rows, self.width).map(|batch| LabeledBatch {
            batch,
            targets: members.iter().map(|&i| self.partition[i].target).collect(),
            members,
        }))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}
