use fixedbitset::FixedBitSet;
use rand::seq::index;
use rand::Rng;

use super::mask::{TaskId, TaskMask};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// The shared (t, m) weight matrix of one layer together with the masks that
/// partition it between tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinualMemory<T> {
    layer: usize,
    rows: usize,
    cols: usize,
    weights: Vec<T>,
    masks: Vec<TaskMask>,
    occupied: FixedBitSet,
    frozen_through: TaskId,
}

impl<T: Real> ContinualMemory<T> {
    pub fn new(layer: usize, rows: usize, cols: usize) -> Self {
        Self {
            layer,
            rows,
            cols,
            weights: vec![T::zero(); rows * cols],
            masks: Vec::new(),
            occupied: FixedBitSet::with_capacity(rows * cols),
            frozen_through: 0,
        }
    }

    /// Reassembles a memory from stored parts, re-validating every invariant.
    pub fn from_parts(
        layer: usize,
        rows: usize,
        cols: usize,
        weights: Vec<T>,
        masks: Vec<TaskMask>,
        frozen_through: TaskId,
    ) -> Result<Self> {
        let mut mem = Self::new(layer, rows, cols);
        if weights.len() != rows * cols {
            return Err(Error::Shape(format!(
                "layer {layer}: memory needs {} weights, got {}",
                rows * cols,
                weights.len()
            )));
        }
        mem.weights = weights;
        for (k, mask) in masks.into_iter().enumerate() {
            if mask.task_id() != k as TaskId + 1 || mask.rows() != rows || mask.cols() != cols {
                return Err(Error::Protocol(format!(
                    "layer {layer}: mask {} does not fit this memory",
                    mask.task_id()
                )));
            }
            if !mask.bits().is_disjoint(&mem.occupied) {
                return Err(Error::Protocol(format!(
                    "layer {layer}: mask {} overlaps an earlier task",
                    mask.task_id()
                )));
            }
            mem.occupied.union_with(mask.bits());
            mem.masks.push(mask);
        }
        if frozen_through as usize > mem.masks.len() || mem.masks.len() > frozen_through as usize + 1 {
            return Err(Error::Protocol(format!(
                "layer {layer}: frozen_through {frozen_through} inconsistent with {} masks",
                mem.masks.len()
            )));
        }
        mem.frozen_through = frozen_through;
        Ok(mem)
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    /// Capacity t (rows of the memory).
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Kernel parameter count m (columns of the memory).
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn total(&self) -> usize {
        self.rows * self.cols
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weight(&self, row: usize, col: usize) -> T {
        self.weights[row * self.cols + col]
    }

    pub fn masks(&self) -> &[TaskMask] {
        &self.masks
    }

    pub fn mask(&self, task_id: TaskId) -> Option<&TaskMask> {
        self.masks.iter().find(|m| m.task_id() == task_id)
    }

    pub fn frozen_through(&self) -> TaskId {
        self.frozen_through
    }

    /// Task whose mask is allocated but not yet frozen.
    pub fn active_task(&self) -> Option<TaskId> {
        self.masks
            .last()
            .map(|m| m.task_id())
            .filter(|&id| id > self.frozen_through)
    }

    /// Entries not covered by any mask: `t·m − Σ popcount`.
    pub fn free_count(&self) -> usize {
        self.total() - self.masks.iter().map(TaskMask::popcount).sum::<usize>()
    }

    pub fn is_occupied(&self, idx: usize) -> bool {
        self.occupied.contains(idx)
    }

    /// Number of entries a fraction of this memory corresponds to, rounded
    /// half to even.
    pub fn entries_for(&self, fraction: f64) -> Result<usize> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "layer {}: mask fraction must lie in (0, 1], got {fraction}",
                self.layer
            )));
        }
        Ok((fraction * self.total() as f64).round_ties_even() as usize)
    }

    /// Samples a mask uniformly without replacement from the free entries.
    pub fn allocate_mask<R: Rng>(&mut self, task_id: TaskId, fraction: f64, rng: &mut R) -> Result<&TaskMask> {
        if task_id != self.frozen_through + 1 || self.active_task().is_some() {
            return Err(Error::Protocol(format!(
                "layer {}: cannot allocate task {task_id}; tasks 1..={} are frozen and {:?} is active",
                self.layer,
                self.frozen_through,
                self.active_task()
            )));
        }
        let requested = self.entries_for(fraction)?;
        let free = self.free_count();
        if requested > free {
            return Err(Error::CapacityExhausted {
                layer: self.layer,
                task_id,
                requested,
                free,
                total: self.total(),
            });
        }
        if requested == 0 {
            return Err(Error::InvalidParameter(format!(
                "layer {}: fraction {fraction} selects no entries of a {}-entry memory",
                self.layer,
                self.total()
            )));
        }
        let free_positions: Vec<usize> = self.occupied.zeroes().collect();
        let chosen: Vec<usize> = index::sample(rng, free_positions.len(), requested)
            .into_iter()
            .map(|k| free_positions[k])
            .collect();
        let mask = TaskMask::from_indices(task_id, self.rows, self.cols, fraction, chosen)?;
        debug_assert!(mask.bits().is_disjoint(&self.occupied));
        self.occupied.union_with(mask.bits());
        self.masks.push(mask);
        Ok(self.masks.last().expect("just pushed"))
    }

    /// Overwrites the masked entries of the active task, in mask index order.
    pub(crate) fn write_masked(&mut self, task_id: TaskId, values: &[T]) -> Result<()> {
        if self.active_task() != Some(task_id) {
            return Err(Error::Protocol(format!(
                "layer {}: task {task_id} is not trainable (frozen through {})",
                self.layer, self.frozen_through
            )));
        }
        let mask = self.masks.last().expect("active task has a mask");
        if values.len() != mask.popcount() {
            return Err(Error::Shape(format!(
                "layer {}: {} masked values for a mask of {}",
                self.layer,
                values.len(),
                mask.popcount()
            )));
        }
        for (&idx, &v) in mask.indices().iter().zip(values) {
            self.weights[idx] = v;
        }
        Ok(())
    }

    pub(crate) fn masked_values(&self, task_id: TaskId) -> Option<Vec<T>> {
        self.mask(task_id)
            .map(|m| m.indices().iter().map(|&i| self.weights[i]).collect())
    }

    pub(crate) fn freeze(&mut self, task_id: TaskId) -> Result<()> {
        if self.active_task() != Some(task_id) {
            return Err(Error::Protocol(format!(
                "layer {}: out-of-order freeze of task {task_id} (frozen through {})",
                self.layer, self.frozen_through
            )));
        }
        self.frozen_through = task_id;
        Ok(())
    }

    /// Drops the active task's mask and zeroes its entries.
    pub(crate) fn release(&mut self, task_id: TaskId) -> Result<()> {
        if self.active_task() != Some(task_id) {
            return Err(Error::Protocol(format!(
                "layer {}: only the active task can be released, not {task_id}",
                self.layer
            )));
        }
        let mask = self.masks.pop().expect("active task has a mask");
        for &idx in mask.indices() {
            self.weights[idx] = T::zero();
            self.occupied.set(idx, false);
        }
        Ok(())
    }

    pub(crate) fn expand(&mut self, extra_rows: usize) {
        if extra_rows == 0 {
            return;
        }
        self.rows += extra_rows;
        self.weights.resize(self.rows * self.cols, T::zero());
        self.occupied.grow(self.rows * self.cols);
        for mask in &mut self.masks {
            mask.grow_rows(extra_rows);
        }
    }
}
