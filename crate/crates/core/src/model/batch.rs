use crate::error::{FuxiError, Result};

/// A padded mini-batch of user histories, row-major `[batch, width]`.
///
/// Valid entries of each row occupy a prefix of length `valid_len[b]`; the
/// rest hold item 0 and timestamp 0. Timestamps are non-decreasing over the
/// valid prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    items: Vec<usize>,
    timestamps: Vec<i64>,
    valid_len: Vec<usize>,
    width: usize,
}

impl SequenceBatch {
    pub fn new(items: Vec<usize>, timestamps: Vec<i64>, valid_len: Vec<usize>, width: usize) -> Result<Self> {
        let rows = valid_len.len();
        if items.len() != rows * width || timestamps.len() != rows * width {
            return Err(FuxiError::Shape {
                op: "SequenceBatch::new",
                lhs: vec![items.len(), timestamps.len()],
                rhs: vec![rows, width],
            });
        }
        for b in 0..rows {
            let len = valid_len[b];
            if len > width {
                return Err(FuxiError::invalid(format!("row {b}: valid_len {len} exceeds width {width}")));
            }
            let row = &items[b * width..(b + 1) * width];
            let ts = &timestamps[b * width..(b + 1) * width];
            for j in 0..width {
                if (row[j] == 0) != (j >= len) {
                    return Err(FuxiError::invalid(format!(
                        "row {b}: item at {j} violates the padding-suffix layout"
                    )));
                }
                if j >= len && ts[j] != 0 {
                    return Err(FuxiError::invalid(format!("row {b}: padding timestamp at {j} is not 0")));
                }
                if j > 0 && j < len && ts[j] < ts[j - 1] {
                    return Err(FuxiError::invalid(format!("row {b}: timestamps decrease at {j}")));
                }
            }
        }
        Ok(SequenceBatch {
            items,
            timestamps,
            valid_len,
            width,
        })
    }

    /// Builds a batch of the given width from `(item, timestamp)` histories,
    /// keeping the most recent `width` events of longer ones.
    pub fn from_histories<'a, I>(histories: I, width: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [usize], &'a [i64])>,
    {
        let mut items = Vec::new();
        let mut timestamps = Vec::new();
        let mut valid_len = Vec::new();
        for (its, ts) in histories {
            if its.len() != ts.len() {
                return Err(FuxiError::invalid("items and timestamps differ in length"));
            }
            let start = its.len().saturating_sub(width);
            let len = its.len() - start;
            items.extend_from_slice(&its[start..]);
            items.extend(std::iter::repeat(0).take(width - len));
            timestamps.extend_from_slice(&ts[start..]);
            timestamps.extend(std::iter::repeat(0).take(width - len));
            valid_len.push(len);
        }
        Self::new(items, timestamps, valid_len, width)
    }

    pub fn batch_size(&self) -> usize {
        self.valid_len.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn valid_len(&self) -> &[usize] {
        &self.valid_len
    }

    pub fn item(&self, b: usize, j: usize) -> usize {
        self.items[b * self.width + j]
    }

    pub fn timestamp(&self, b: usize, j: usize) -> i64 {
        self.timestamps[b * self.width + j]
    }

    pub fn row_items(&self, b: usize) -> &[usize] {
        &self.items[b * self.width..b * self.width + self.valid_len[b]]
    }

    pub fn row_timestamps(&self, b: usize) -> &[i64] {
        &self.timestamps[b * self.width..b * self.width + self.valid_len[b]]
    }

    /// Same rows truncated to the longest valid prefix. Valid positions are
    /// unaffected because computations never read past `valid_len`.
    pub fn cropped(&self) -> SequenceBatch {
        let w = self.valid_len.iter().copied().max().unwrap_or(0).max(1).min(self.width);
        if w == self.width {
            return self.clone();
        }
        let mut items = Vec::with_capacity(self.batch_size() * w);
        let mut timestamps = Vec::with_capacity(self.batch_size() * w);
        for b in 0..self.batch_size() {
            items.extend_from_slice(&self.items[b * self.width..b * self.width + w]);
            timestamps.extend_from_slice(&self.timestamps[b * self.width..b * self.width + w]);
        }
        SequenceBatch {
            items,
            timestamps,
            valid_len: self.valid_len.clone(),
            width: w,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_prefix_padding() {
        assert!(SequenceBatch::new(vec![1, 0, 2], vec![1, 0, 2], vec![1], 3).is_err());
        assert!(SequenceBatch::new(vec![1, 2, 0], vec![5, 4, 0], vec![2], 3).is_err());
        assert!(SequenceBatch::new(vec![1, 2, 0], vec![4, 5, 0], vec![2], 3).is_ok());
    }

    #[test]
    fn from_histories_truncates_to_recent() {
        let items = [1usize, 2, 3, 4];
        let ts = [10i64, 20, 30, 40];
        let b = SequenceBatch::from_histories([(&items[..], &ts[..])], 3).unwrap();
        assert_eq!(b.items(), &[2, 3, 4]);
        assert_eq!(b.timestamps(), &[20, 30, 40]);
        let b = SequenceBatch::from_histories([(&items[..2], &ts[..2])], 3).unwrap();
        assert_eq!(b.items(), &[1, 2, 0]);
        assert_eq!(b.valid_len(), &[2]);
    }

    #[test]
    fn cropping_keeps_valid_prefixes() {
        let b = SequenceBatch::new(vec![1, 2, 0, 0, 3, 0, 0, 0], vec![1, 2, 0, 0, 5, 0, 0, 0], vec![2, 1], 4).unwrap();
        let c = b.cropped();
        assert_eq!(c.width(), 2);
        assert_eq!(c.items(), &[1, 2, 3, 0]);
    }
}
