/// Causal attention mask for a batch of left-aligned sequences.
///
/// Query `i` may attend key `j` iff `j <= i < len[b]`. The diagonal is
/// allowed; padding queries attend nothing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalMask {
    lens: Vec<usize>,
    width: usize,
}

impl CausalMask {
    pub fn new(lens: Vec<usize>, width: usize) -> Self {
        CausalMask { lens, width }
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self, b: usize) -> usize {
        self.lens[b]
    }

    #[inline]
    pub fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        j <= i && i < self.lens[b]
    }

    /// Exclusive upper bound of allowed keys for query `i` of sequence `b`.
    #[inline]
    pub fn key_end(&self, b: usize, i: usize) -> usize {
        if i < self.lens[b] {
            i + 1
        } else {
            0
        }
    }
}
