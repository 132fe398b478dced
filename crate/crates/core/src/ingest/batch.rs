use serde::{Deserialize, Serialize};

use super::{Example, PAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadSide {
    /// Most recent item always sits in the last column.
    #[default]
    Left,
    Right,
}

/// A padded mini-batch of examples.
///
/// Item-aligned fields are flattened row-major `rows × max_len`. Masked
/// positions hold item 0 and timestamp 0.
///
/// `intervals` is `rows × (max_len + 1)` and indexed along the sequence, not
/// the padded layout: for a row of length `n`, `intervals[0] = 0`,
/// `intervals[k] = t_k − t_{k−1}` for `0 < k < n` and
/// `intervals[n] = target_timestamp − t_{n−1}`. Entries past `n` are zero and
/// never read.
#[derive(Clone, Debug)]
pub struct Batch {
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub target_item: Vec<usize>,
    pub target_timestamp: Vec<i64>,
    pub intervals: Tensor,
    pub max_len: usize,
    pub pad_side: PadSide,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    /// Flat index of the `k`-th real interaction of `row`.
    #[inline]
    pub fn position(&self, row: usize, k: usize) -> usize {
        debug_assert!(k < self.lengths[row]);
        let offset = match self.pad_side {
            PadSide::Left => self.max_len - self.lengths[row],
            PadSide::Right => 0,
        };
        row * self.max_len + offset + k
    }

    /// Flat index of the most recent interaction of `row`.
    pub fn last_position(&self, row: usize) -> usize {
        self.position(row, self.lengths[row] - 1)
    }

    pub fn last_positions(&self) -> Vec<usize> {
        (0..self.rows()).map(|r| self.last_position(r)).collect()
    }

    /// Builds a single batch from `examples`, truncating each input to its
    /// most recent `max_len` interactions.
    pub fn from_examples(examples: &[Example], max_len: usize, pad_side: PadSide) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::Invalid("max_len must be at least 1".into()));
        }
        let m = examples.len();
        let mut b = Batch {
            items: vec![PAD; m * max_len],
            timestamps: vec![0; m * max_len],
            mask: vec![false; m * max_len],
            lengths: Vec::with_capacity(m),
            target_item: Vec::with_capacity(m),
            target_timestamp: Vec::with_capacity(m),
            intervals: Tensor::zeros(m, max_len + 1),
            max_len,
            pad_side,
        };
        for (row, ex) in examples.iter().enumerate() {
            let items = ex.input_items();
            let ts = ex.input_timestamps();
            let start = items.len().saturating_sub(max_len);
            let (items, ts) = (&items[start..], &ts[start..]);
            let n = items.len();
            let last = ts[n - 1];
            if ex.target_timestamp() < last {
                return Err(Error::NonCausalTarget {
                    target: ex.target_timestamp(),
                    last,
                });
            }
            b.lengths.push(n);
            b.target_item.push(ex.target_item());
            b.target_timestamp.push(ex.target_timestamp());
            for k in 0..n {
                let p = b.position(row, k);
                b.items[p] = items[k];
                b.timestamps[p] = ts[k];
                b.mask[p] = true;
            }
            let t = b.intervals.row_mut(row);
            t[0] = 0.0;
            for k in 1..n {
                t[k] = (ts[k] - ts[k - 1]) as f64;
            }
            t[n] = (ex.target_timestamp() - last) as f64;
        }
        Ok(b)
    }
}

/// Cuts `examples` into consecutive batches of at most `batch_size` rows.
/// Each batch is only as wide as its longest (truncated) input.
pub fn make_batches(
    examples: &[Example],
    max_len: usize,
    batch_size: usize,
    pad_side: PadSide,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch_size must be at least 1".into()));
    }
    examples
        .chunks(batch_size)
        .map(|chunk| {
            let longest = chunk.iter().map(|e| e.input_items().len()).max().unwrap_or(1);
            Batch::from_examples(chunk, longest.min(max_len), pad_side)
        })
        .collect()
}
