use std::ops::Range;

use crate::error::{NumericsError, Result};

/// Partition of the rows of a packed matrix into consecutive variable-length
/// sequences. A batch of `B` sequences with lengths `T_b` is stored as one
/// `(Σ T_b) × D` matrix; attention, shifts and pooling respect the bounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(NumericsError::Config(format!(
                "segments need at least one non-empty sequence, got {lengths:?}"
            )));
        }
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        for &l in lengths {
            offsets.push(offsets.last().unwrap() + l);
        }
        Ok(Self { offsets })
    }

    /// A single sequence covering `rows` rows.
    pub fn single(rows: usize) -> Result<Self> {
        Self::from_lengths(&[rows])
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total_rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn len_of(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.offsets.windows(2).map(|w| w[0]..w[1])
    }

    /// For each packed row, the index of the sequence it belongs to.
    pub fn owners(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_rows());
        for (i, r) in self.iter().enumerate() {
            out.extend(std::iter::repeat_n(i, r.len()));
        }
        out
    }

    /// Position of each packed row within its own sequence.
    pub fn positions(&self) -> Vec<usize> {
        self.iter().flat_map(|r| 0..r.len()).collect()
    }
}
