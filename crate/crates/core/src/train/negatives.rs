use rand::seq::index;
use rand::Rng;

use crate::error::{FuxiError, Result};

/// `n` distinct items drawn uniformly from `[1, vocab)` without the positive.
pub fn sample_negatives<R: Rng + ?Sized>(positive: usize, n: usize, vocab: usize, rng: &mut R) -> Result<Vec<usize>> {
    if positive == 0 || positive >= vocab {
        return Err(FuxiError::IdOutOfRange { id: positive, vocab });
    }
    let pool = vocab - 2;
    if n > pool {
        return Err(FuxiError::invalid(format!(
            "cannot draw {n} distinct negatives from {pool} candidates"
        )));
    }
    Ok(index::sample(rng, pool, n)
        .into_iter()
        .map(|k| if k + 1 >= positive { k + 2 } else { k + 1 })
        .collect())
}
