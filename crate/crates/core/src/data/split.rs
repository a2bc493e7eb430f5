use serde::{Deserialize, Serialize};

use crate::error::{FuxiError, Result};

use super::sequences::{DatasetStats, ItemRemap, SequenceSet};

/// A model input history, optionally with the single item to predict after it.
/// Training examples carry no target: every next item inside the history
/// supervises the position before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub user: u64,
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
    pub target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub remap: ItemRemap,
    pub stats: DatasetStats,
    /// Users removed for having fewer than three interactions.
    pub dropped_users: usize,
}

impl DatasetSplit {
    pub fn vocab(&self) -> usize {
        self.remap.vocab()
    }
}

/// Leave-last-out: the last event is the test target, the one before it the
/// validation target and the rest the training history.
pub fn split_leave_last(sequences: &SequenceSet) -> Result<DatasetSplit> {
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    let mut dropped_users = 0;
    for seq in &sequences.users {
        let len = seq.items.len();
        if len < 3 {
            dropped_users += 1;
            continue;
        }
        let example = |end: usize, target: Option<usize>| Example {
            user: seq.user,
            items: seq.items[..end].to_vec(),
            timestamps: seq.timestamps[..end].to_vec(),
            target,
        };
        train.push(example(len - 2, None));
        validation.push(example(len - 2, Some(seq.items[len - 2])));
        test.push(example(len - 1, Some(seq.items[len - 1])));
    }
    if test.is_empty() {
        return Err(FuxiError::Data("no user has at least three interactions".into()));
    }
    Ok(DatasetSplit {
        train,
        validation,
        test,
        remap: sequences.remap.clone(),
        stats: sequences.stats.clone(),
        dropped_users,
    })
}
