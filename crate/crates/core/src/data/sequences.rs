use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{FuxiError, Result};

use super::parse::InteractionEvent;

/// Dense item ids: source id `raw_ids[k]` becomes `k + 1`; 0 is padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRemap {
    pub raw_ids: Vec<u64>,
}

impl ItemRemap {
    pub fn len(&self) -> usize {
        self.raw_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_ids.is_empty()
    }

    pub fn dense(&self, raw: u64) -> Option<usize> {
        self.raw_ids.binary_search(&raw).ok().map(|k| k + 1)
    }

    pub fn raw(&self, dense: usize) -> Option<u64> {
        dense.checked_sub(1).and_then(|k| self.raw_ids.get(k).copied())
    }

    /// Rows needed in an item table: every dense id plus padding.
    pub fn vocab(&self) -> usize {
        self.raw_ids.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// Mean per-user length before truncation.
    pub mean_length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserSequence {
    pub user: u64,
    /// Dense ids, oldest first.
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSet {
    /// Ordered by ascending user id.
    pub users: Vec<UserSequence>,
    pub remap: ItemRemap,
    pub stats: DatasetStats,
}

/// Groups events per user, sorts each history by timestamp (ties keep input
/// order), remaps item ids densely in ascending source-id order and keeps
/// the most recent `n` events of each user.
pub fn build_sequences(events: &[InteractionEvent], n: usize) -> Result<SequenceSet> {
    if events.is_empty() {
        return Err(FuxiError::Data("no events to build sequences from".into()));
    }
    if n == 0 {
        return Err(FuxiError::invalid("maximum sequence length must be positive"));
    }
    let mut raw_ids: Vec<u64> = events.iter().map(|e| e.item).collect();
    raw_ids.sort_unstable();
    raw_ids.dedup();
    let remap = ItemRemap { raw_ids };

    let mut per_user: BTreeMap<u64, Vec<&InteractionEvent>> = BTreeMap::new();
    for e in events {
        per_user.entry(e.user).or_default().push(e);
    }
    let users: Vec<UserSequence> = per_user
        .into_iter()
        .map(|(user, mut evs)| {
            evs.sort_by_key(|e| e.timestamp);
            let start = evs.len().saturating_sub(n);
            let kept = &evs[start..];
            UserSequence {
                user,
                items: kept.iter().map(|e| remap.dense(e.item).expect("item seen")).collect(),
                timestamps: kept.iter().map(|e| e.timestamp).collect(),
            }
        })
        .collect();
    let stats = DatasetStats {
        users: users.len(),
        items: remap.len(),
        interactions: events.len(),
        mean_length: events.len() as f64 / users.len() as f64,
    };
    Ok(SequenceSet { users, remap, stats })
}
