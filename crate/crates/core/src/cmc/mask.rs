use fixedbitset::FixedBitSet;

use crate::error::{Error, Result};

pub type TaskId = u32;

/// Binary selection over the (t, m) memory matrix owned by one task.
///
/// Bits are indexed row-major (`row * m + col`), so appending memory rows
/// leaves every existing index valid and the new rows unset.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMask {
    task_id: TaskId,
    rows: usize,
    cols: usize,
    fraction: f64,
    bits: FixedBitSet,
    indices: Vec<usize>,
}

impl TaskMask {
    /// Builds a mask from set positions. Indices must be in range; they are
    /// sorted and deduplicated.
    pub fn from_indices(
        task_id: TaskId,
        rows: usize,
        cols: usize,
        fraction: f64,
        mut indices: Vec<usize>,
    ) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        let total = rows * cols;
        if indices.last().is_some_and(|&i| i >= total) {
            return Err(Error::Shape(format!(
                "mask index out of range for a {rows}x{cols} memory"
            )));
        }
        let mut bits = FixedBitSet::with_capacity(total);
        for &i in &indices {
            bits.insert(i);
        }
        Ok(Self {
            task_id,
            rows,
            cols,
            fraction,
            bits,
            indices,
        })
    }

    pub fn task_id(&self) -> TaskId {
        self.task_id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Requested fraction of the memory at allocation time.
    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn popcount(&self) -> usize {
        self.indices.len()
    }

    /// Set positions in ascending row-major order.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn bits(&self) -> &FixedBitSet {
        &self.bits
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row < self.rows && col < self.cols && self.bits.contains(row * self.cols + col)
    }

    pub fn is_disjoint(&self, other: &TaskMask) -> bool {
        self.bits.is_disjoint(&other.bits)
    }

    /// Dense 0/1 view, row-major.
    pub fn to_dense(&self) -> Vec<u8> {
        (0..self.rows * self.cols)
            .map(|i| self.bits.contains(i) as u8)
            .collect()
    }

    pub(crate) fn grow_rows(&mut self, extra: usize) {
        self.rows += extra;
        self.bits.grow(self.rows * self.cols);
    }
}
