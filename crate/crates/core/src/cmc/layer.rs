use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::mask::{TaskId, TaskMask};
use super::memory::ContinualMemory;
use crate::conv::conv2d_forward;
use crate::error::{Error, Result};
use crate::seed::{rng_for, stream};
use crate::tensor::{Kernel, Real, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub k_in: usize,
    pub k_out: usize,
    pub kernel_size: usize,
}

impl LayerGeometry {
    pub fn new(k_in: usize, k_out: usize, kernel_size: usize) -> Self {
        Self {
            k_in,
            k_out,
            kernel_size,
        }
    }

    /// Kernel parameter count `k_in · k_out · n · n`.
    pub fn kernel_params(&self) -> usize {
        self.k_in * self.k_out * self.kernel_size * self.kernel_size
    }
}

impl std::fmt::Display for LayerGeometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}->{} {}x{}",
            self.k_in, self.k_out, self.kernel_size, self.kernel_size
        )
    }
}

/// Length-t weights that mix the memory rows into a kernel for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector<T> {
    pub task_id: TaskId,
    pub values: Vec<T>,
}

/// Per-task state other than the memory itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSlot<T> {
    pub vector: TaskVector<T>,
    pub bias: Vec<T>,
    /// Whether the frozen kernels of earlier tasks are added to this task's kernel.
    pub sharing: bool,
}

/// A convolution whose kernel for task n is `Σ_i T_i · (M ⊙ H_i)`, with the sum
/// over i < n included only when the task shares knowledge.
#[derive(Debug, Clone, PartialEq)]
pub struct CmcLayer<T> {
    index: usize,
    geometry: LayerGeometry,
    memory: ContinualMemory<T>,
    tasks: BTreeMap<TaskId, TaskSlot<T>>,
    cached_old: Option<(TaskId, Vec<T>)>,
}

impl<T: Real> CmcLayer<T> {
    pub fn new(index: usize, geometry: LayerGeometry, capacity: usize) -> Result<Self> {
        if geometry.kernel_size.is_multiple_of(2) || geometry.k_in == 0 || geometry.k_out == 0 {
            return Err(Error::InvalidParameter(format!(
                "layer {index}: unsupported geometry {geometry}"
            )));
        }
        if capacity == 0 {
            return Err(Error::InvalidParameter(format!(
                "layer {index}: capacity t must be at least 1"
            )));
        }
        Ok(Self {
            index,
            geometry,
            memory: ContinualMemory::new(index, capacity, geometry.kernel_params()),
            tasks: BTreeMap::new(),
            cached_old: None,
        })
    }

    pub(crate) fn from_parts(
        index: usize,
        geometry: LayerGeometry,
        memory: ContinualMemory<T>,
        tasks: BTreeMap<TaskId, TaskSlot<T>>,
    ) -> Result<Self> {
        if memory.cols() != geometry.kernel_params() {
            return Err(Error::Shape(format!(
                "layer {index}: memory has {} columns, geometry {geometry} needs {}",
                memory.cols(),
                geometry.kernel_params()
            )));
        }
        if tasks.len() != memory.masks().len() || tasks.keys().zip(memory.masks()).any(|(&id, m)| id != m.task_id()) {
            return Err(Error::Protocol(format!(
                "layer {index}: task slots do not match the allocated masks"
            )));
        }
        for (&id, slot) in &tasks {
            if slot.vector.values.len() != memory.rows() || slot.bias.len() != geometry.k_out {
                return Err(Error::Shape(format!(
                    "layer {index}: task {id} vector/bias has the wrong length"
                )));
            }
        }
        let mut layer = Self {
            index,
            geometry,
            memory,
            tasks,
            cached_old: None,
        };
        if let Some(active) = layer.active_task() {
            layer.refresh_cache(active);
        }
        Ok(layer)
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn geometry(&self) -> LayerGeometry {
        self.geometry
    }

    pub fn memory(&self) -> &ContinualMemory<T> {
        &self.memory
    }

    pub fn capacity(&self) -> usize {
        self.memory.rows()
    }

    pub fn kernel_params(&self) -> usize {
        self.memory.cols()
    }

    /// Every trainable scalar the layer owns over its lifetime: the memory plus
    /// per-task vectors and biases allocated so far.
    pub fn total_params(&self) -> usize {
        self.memory.total() + self.tasks.len() * (self.capacity() + self.geometry.k_out)
    }

    pub fn frozen_through(&self) -> TaskId {
        self.memory.frozen_through()
    }

    pub fn active_task(&self) -> Option<TaskId> {
        self.memory.active_task()
    }

    pub fn tasks(&self) -> &BTreeMap<TaskId, TaskSlot<T>> {
        &self.tasks
    }

    pub fn task(&self, task_id: TaskId) -> Result<&TaskSlot<T>> {
        self.tasks.get(&task_id).ok_or(Error::UnknownTask(task_id))
    }

    pub fn mask(&self, task_id: TaskId) -> Result<&TaskMask> {
        self.memory.mask(task_id).ok_or(Error::UnknownTask(task_id))
    }

    pub fn bias(&self, task_id: TaskId) -> Result<&[T]> {
        Ok(&self.task(task_id)?.bias)
    }

    pub fn cached_old_kernel(&self) -> Option<(TaskId, &[T])> {
        self.cached_old.as_ref().map(|(id, k)| (*id, k.as_slice()))
    }

    /// Allocates a mask for the next task and initializes its parameters.
    ///
    /// Masked memory entries are drawn from N(0, σ_M²) and the task vector from
    /// N(μ, (0.1 μ)²) with μ = 1/(fraction·t). σ_M is chosen so the composed
    /// kernel has the Kaiming fan-in variance 2/(k_in·n²).
    pub fn begin_task(&mut self, task_id: TaskId, fraction: f64, sharing: bool, seed: u64) -> Result<()> {
        self.begin_task_scaled(task_id, fraction, sharing, seed, 1.0)
    }

    /// [`Self::begin_task`] with σ_M multiplied by `init_scale`, so the new
    /// term starts at `init_scale` times the Kaiming standard deviation.
    pub fn begin_task_scaled(
        &mut self,
        task_id: TaskId,
        fraction: f64,
        sharing: bool,
        seed: u64,
        init_scale: f64,
    ) -> Result<()> {
        if !(init_scale >= 0.0 && init_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "layer {}: init scale must be finite and >= 0, got {init_scale}",
                self.index
            )));
        }
        let mut mask_rng = rng_for(seed, &[stream::MASK]);
        let popcount = self.memory.allocate_mask(task_id, fraction, &mut mask_rng)?.popcount();

        let t = self.capacity() as f64;
        let n = self.geometry.kernel_size as f64;
        let mean_t = 1.0 / (fraction * t);
        let sigma_t = 0.1 * mean_t;
        let target_var = 2.0 / (self.geometry.k_in as f64 * n * n);
        // Var(K_j) = (fraction·t) · E[T²] · σ_M² with E[T²] = 1.01 μ²
        let sigma_m = init_scale * (target_var * fraction * t / 1.01).sqrt();

        let mut init_rng = rng_for(seed, &[stream::INIT]);
        let m_dist = Normal::new(0.0, sigma_m).expect("finite sigma");
        let t_dist = Normal::new(mean_t, sigma_t).expect("finite sigma");
        let masked: Vec<T> = (0..popcount)
            .map(|_| T::from_f64_lossy(m_dist.sample(&mut init_rng)))
            .collect();
        let vector: Vec<T> = (0..self.capacity())
            .map(|_| T::from_f64_lossy(t_dist.sample(&mut init_rng)))
            .collect();
        self.memory.write_masked(task_id, &masked)?;
        self.tasks.insert(
            task_id,
            TaskSlot {
                vector: TaskVector {
                    task_id,
                    values: vector,
                },
                bias: vec![T::zero(); self.geometry.k_out],
                sharing,
            },
        );
        self.refresh_cache(task_id);
        Ok(())
    }

    fn refresh_cache(&mut self, task_id: TaskId) {
        let sharing = self.tasks.get(&task_id).is_some_and(|s| s.sharing);
        self.cached_old = sharing.then(|| (task_id, self.compute_old_kernel(task_id)));
    }

    /// `T_i · (M ⊙ H_i)` flattened to length m. Entries are accumulated in
    /// ascending row order for each column.
    pub fn task_term(&self, task_id: TaskId) -> Result<Vec<T>> {
        let slot = self.task(task_id)?;
        let mask = self.mask(task_id)?;
        let m = self.kernel_params();
        let weights = self.memory.weights();
        let mut term = vec![T::zero(); m];
        for &idx in mask.indices() {
            term[idx % m] += slot.vector.values[idx / m] * weights[idx];
        }
        Ok(term)
    }

    /// `Σ_{i<n} T_i · (M ⊙ H_i)`, each term formed separately and summed in task order.
    fn compute_old_kernel(&self, task_id: TaskId) -> Vec<T> {
        let mut old = vec![T::zero(); self.kernel_params()];
        for (&id, _) in self.tasks.range(..task_id) {
            let term = self.task_term(id).expect("registered task");
            for (o, v) in old.iter_mut().zip(term) {
                *o += v;
            }
        }
        old
    }

    /// Frozen contribution seen by `task_id`, recomputed from the memory.
    pub fn old_kernel(&self, task_id: TaskId) -> Result<Vec<T>> {
        self.task(task_id)?;
        Ok(self.compute_old_kernel(task_id))
    }

    /// Kernel used by `task_id`, shaped (k_out, k_in, n, n).
    pub fn estimate_kernel(&self, task_id: TaskId) -> Result<Kernel<T>> {
        let slot = self.task(task_id)?;
        if task_id > self.frozen_through() + 1 {
            return Err(Error::Protocol(format!(
                "layer {}: task {task_id} has unfrozen predecessors",
                self.index
            )));
        }
        let term = self.task_term(task_id)?;
        let data = if slot.sharing {
            let mut old = match &self.cached_old {
                Some((id, cached)) if *id == task_id => {
                    debug_assert_eq!(
                        cached,
                        &self.compute_old_kernel(task_id),
                        "cached frozen kernel drifted"
                    );
                    cached.clone()
                }
                _ => self.compute_old_kernel(task_id),
            };
            for (o, v) in old.iter_mut().zip(term) {
                *o += v;
            }
            old
        } else {
            term
        };
        let g = self.geometry;
        Kernel::new(g.k_out, g.k_in, g.kernel_size, data)
    }

    pub fn forward(&self, input: &Tensor4<T>, task_id: TaskId) -> Result<Tensor4<T>> {
        let kernel = self.estimate_kernel(task_id)?;
        conv2d_forward(input, &kernel, self.bias(task_id)?)
    }

    fn require_active(&self, task_id: TaskId) -> Result<()> {
        self.task(task_id)?;
        if self.active_task() != Some(task_id) {
            return Err(Error::Protocol(format!(
                "layer {}: task {task_id} is frozen (frozen through {})",
                self.index,
                self.frozen_through()
            )));
        }
        Ok(())
    }

    /// Length of the flat trainable vector of the active task:
    /// `[T_n (t) | bias (k_out) | masked memory entries]`.
    pub fn active_param_len(&self, task_id: TaskId) -> Result<usize> {
        Ok(self.capacity() + self.geometry.k_out + self.mask(task_id)?.popcount())
    }

    pub fn active_params(&self, task_id: TaskId) -> Result<Vec<T>> {
        self.require_active(task_id)?;
        let slot = self.task(task_id)?;
        let mut out = slot.vector.values.clone();
        out.extend_from_slice(&slot.bias);
        out.extend(self.memory.masked_values(task_id).expect("active mask"));
        Ok(out)
    }

    /// Writes the active task's parameters. Frozen tasks reject every write.
    pub fn set_active_params(&mut self, task_id: TaskId, params: &[T]) -> Result<()> {
        self.require_active(task_id)?;
        let expected = self.active_param_len(task_id)?;
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "layer {}: {} params for a layout of {expected}",
                self.index,
                params.len()
            )));
        }
        let (t, k_out) = (self.capacity(), self.geometry.k_out);
        self.memory.write_masked(task_id, &params[t + k_out..])?;
        let slot = self.tasks.get_mut(&task_id).expect("checked");
        slot.vector.values.copy_from_slice(&params[..t]);
        slot.bias.copy_from_slice(&params[t..t + k_out]);
        Ok(())
    }

    /// Maps kernel and bias gradients onto the active task's flat parameters.
    /// Frozen terms carry no gradient, so only `T_n`, the bias and the entries
    /// under `H_n` receive anything.
    pub fn backward_masked(&self, task_id: TaskId, grad_kernel: &Kernel<T>, grad_bias: &[T]) -> Result<Vec<T>> {
        self.require_active(task_id)?;
        let m = self.kernel_params();
        if grad_kernel.len() != m || grad_bias.len() != self.geometry.k_out {
            return Err(Error::Shape(format!(
                "layer {}: gradient shapes do not match geometry {}",
                self.index, self.geometry
            )));
        }
        let t = self.capacity();
        let slot = self.task(task_id)?;
        let mask = self.mask(task_id)?;
        let weights = self.memory.weights();
        let gk = grad_kernel.data();
        let mut out = vec![T::zero(); t + grad_bias.len() + mask.popcount()];
        let (grad_t, rest) = out.split_at_mut(t);
        let (grad_b, grad_m) = rest.split_at_mut(grad_bias.len());
        grad_b.copy_from_slice(grad_bias);
        for (k, &idx) in mask.indices().iter().enumerate() {
            let (r, j) = (idx / m, idx % m);
            grad_t[r] += weights[idx] * gk[j];
            grad_m[k] = slot.vector.values[r] * gk[j];
        }
        Ok(out)
    }

    /// Dense (t, m) view of the memory gradient, zero outside the active mask.
    pub fn dense_memory_grad(&self, task_id: TaskId, grad_kernel: &Kernel<T>) -> Result<Vec<T>> {
        let flat = self.backward_masked(task_id, grad_kernel, &vec![T::zero(); self.geometry.k_out])?;
        let offset = self.capacity() + self.geometry.k_out;
        let mut dense = vec![T::zero(); self.memory.total()];
        for (&idx, &g) in self.mask(task_id)?.indices().iter().zip(&flat[offset..]) {
            dense[idx] = g;
        }
        Ok(dense)
    }

    pub fn freeze_task(&mut self, task_id: TaskId) -> Result<()> {
        self.memory.freeze(task_id)?;
        self.cached_old = None;
        Ok(())
    }

    /// Removes the active task as if it had never been allocated.
    pub fn abort_task(&mut self, task_id: TaskId) -> Result<()> {
        self.require_active(task_id)?;
        self.memory.release(task_id)?;
        self.tasks.remove(&task_id);
        self.cached_old = None;
        Ok(())
    }

    /// Appends free memory rows and zero-pads every task vector so frozen
    /// kernels are unchanged.
    pub fn expand_capacity(&mut self, extra_rows: usize) -> Result<()> {
        if let Some(active) = self.active_task() {
            return Err(Error::Protocol(format!(
                "layer {}: cannot expand while task {active} is training",
                self.index
            )));
        }
        self.memory.expand(extra_rows);
        for slot in self.tasks.values_mut() {
            slot.vector.values.resize(self.memory.rows(), T::zero());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv2d_backward;
    use crate::gradcheck::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer(k_in: usize, k_out: usize, t: usize) -> CmcLayer<f64> {
        CmcLayer::new(0, LayerGeometry::new(k_in, k_out, 3), t).unwrap()
    }

    #[test]
    fn full_scale_allocation() {
        let mut l = CmcLayer::<f32>::new(0, LayerGeometry::new(64, 64, 3), 5).unwrap();
        assert_eq!(l.kernel_params(), 36864);
        l.begin_task(1, 0.10, true, 11).unwrap();
        assert_eq!(l.mask(1).unwrap().popcount(), 18432);
        l.freeze_task(1).unwrap();
        l.begin_task(2, 0.10, true, 12).unwrap();
        assert!(l.mask(2).unwrap().is_disjoint(l.mask(1).unwrap()));
        assert_eq!(l.memory().free_count(), 5 * 36864 - 2 * 18432);
    }

    #[test]
    fn full_fraction_sets_all_bits_then_exhausts() {
        let mut l = layer(2, 2, 2);
        l.begin_task(1, 1.0, false, 1).unwrap();
        assert_eq!(l.mask(1).unwrap().popcount(), 2 * 36);
        l.freeze_task(1).unwrap();
        let err = l.begin_task(2, 0.01, true, 2).unwrap_err();
        assert!(matches!(
            err,
            Error::CapacityExhausted {
                layer: 0,
                task_id: 2,
                ..
            }
        ));
    }

    #[test]
    fn oversized_second_request_is_rejected() {
        let mut l = layer(4, 4, 5);
        l.begin_task(1, 0.10, true, 1).unwrap();
        l.freeze_task(1).unwrap();
        let free_before = l.memory().free_count();
        assert!(matches!(
            l.begin_task(2, 0.95, true, 2),
            Err(Error::CapacityExhausted { .. })
        ));
        assert_eq!(l.memory().free_count(), free_before);
        assert!(l.task(2).is_err());
        l.begin_task(2, 0.90, true, 2).unwrap();
    }

    #[test]
    fn zero_task_vector_gives_zero_kernel() {
        let mut l = layer(2, 3, 4);
        l.begin_task(1, 0.5, true, 3).unwrap();
        let mut p = l.active_params(1).unwrap();
        p[..4].fill(0.0);
        l.set_active_params(1, &p).unwrap();
        assert!(l.estimate_kernel(1).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_row_full_mask_reproduces_memory_row() {
        let mut l = layer(2, 2, 1);
        l.begin_task(1, 1.0, true, 4).unwrap();
        let mut p = l.active_params(1).unwrap();
        p[0] = 1.0;
        l.set_active_params(1, &p).unwrap();
        let k = l.estimate_kernel(1).unwrap();
        assert_eq!(k.data(), l.memory().weights());
    }

    #[test]
    fn forward_matches_materialized_kernel_and_zero_input() {
        let mut l = layer(2, 3, 3);
        l.begin_task(1, 0.3, true, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor4::from_vec([1, 2, 5, 5], (0..50).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let direct = conv2d_forward(&x, &l.estimate_kernel(1).unwrap(), l.bias(1).unwrap()).unwrap();
        assert_eq!(l.forward(&x, 1).unwrap(), direct);
        let zero = l.forward(&Tensor4::zeros([1, 2, 5, 5]), 1).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_tasks_reject_writes() {
        let mut l = layer(2, 2, 3);
        l.begin_task(1, 0.3, true, 6).unwrap();
        let p = l.active_params(1).unwrap();
        l.freeze_task(1).unwrap();
        assert!(matches!(l.set_active_params(1, &p), Err(Error::Protocol(_))));
        assert!(l.active_params(1).is_err());
        assert!(l.freeze_task(1).is_err());
        assert!(l.freeze_task(2).is_err());
        assert!(matches!(l.estimate_kernel(7), Err(Error::UnknownTask(7))));
    }

    #[test]
    fn later_training_leaves_frozen_kernel_bit_exact() {
        let mut l = layer(3, 2, 5);
        l.begin_task(1, 0.2, true, 7).unwrap();
        l.freeze_task(1).unwrap();
        let before = l.estimate_kernel(1).unwrap();
        l.begin_task(2, 0.2, true, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let p: Vec<f64> = (0..l.active_param_len(2).unwrap())
                .map(|_| rng.random_range(-3.0..3.0))
                .collect();
            l.set_active_params(2, &p).unwrap();
            assert_eq!(l.estimate_kernel(1).unwrap(), before);
        }
        let (id, cached) = l.cached_old_kernel().unwrap();
        assert_eq!(id, 2);
        assert_eq!(cached, l.old_kernel(2).unwrap().as_slice());
        assert_eq!(cached, before.data());
    }

    #[test]
    fn sharing_flag_controls_old_term() {
        let mut l = layer(2, 2, 4);
        l.begin_task(1, 0.25, true, 9).unwrap();
        l.freeze_task(1).unwrap();
        l.begin_task(2, 0.25, false, 10).unwrap();
        assert!(l.cached_old_kernel().is_none());
        assert_eq!(l.estimate_kernel(2).unwrap().data(), l.task_term(2).unwrap().as_slice());
    }

    #[test]
    fn expansion_is_neutral() {
        let mut l = layer(3, 3, 5);
        for id in 1..=3 {
            l.begin_task(id, 0.3, id > 1, 20 + id as u64).unwrap();
            l.freeze_task(id).unwrap();
        }
        let kernels: Vec<_> = (1..=3).map(|i| l.estimate_kernel(i).unwrap()).collect();
        let unchanged = l.clone();
        l.expand_capacity(0).unwrap();
        assert_eq!(l, unchanged);
        l.expand_capacity(15).unwrap();
        assert_eq!(l.capacity(), 20);
        for (i, k) in (1..=3).zip(&kernels) {
            assert_eq!(&l.estimate_kernel(i).unwrap(), k);
            assert_eq!(l.task(i).unwrap().vector.values.len(), 20);
        }
        // new rows are free and allocatable
        let used: usize = (1..=3).map(|i| l.mask(i).unwrap().popcount()).sum();
        assert_eq!(l.memory().free_count(), 20 * 81 - used);
        l.begin_task(4, 0.5, true, 30).unwrap();
        assert!(l.mask(4).unwrap().indices().iter().any(|&i| i >= 5 * 81));
        assert!(l.expand_capacity(1).is_err());
    }

    #[test]
    fn abort_restores_previous_state() {
        let mut l = layer(2, 2, 3);
        l.begin_task(1, 0.3, true, 40).unwrap();
        l.freeze_task(1).unwrap();
        let frozen = l.clone();
        l.begin_task(2, 0.3, true, 41).unwrap();
        l.abort_task(2).unwrap();
        assert_eq!(l, frozen);
    }

    #[test]
    fn full_mask_gradient_matches_finite_differences() {
        let mut l = layer(2, 2, 3);
        l.begin_task(1, 1.0, false, 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let x = Tensor4::from_vec([2, 2, 4, 4], (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor4::from_vec([2, 2, 4, 4], (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let p0 = l.active_params(1).unwrap();
        let kernel = l.estimate_kernel(1).unwrap();
        let g = conv2d_backward(&x, &kernel, &w).unwrap();
        let analytic = l.backward_masked(1, &g.kernel, &g.bias).unwrap();
        let probe = l.clone();
        let f = |p: &[f64]| {
            let mut ll = probe.clone();
            ll.set_active_params(1, p).unwrap();
            ll.forward(&x, 1).unwrap().dot(&w).unwrap()
        };
        let err = finite_diff_check(f, &p0, &analytic, 1e-5);
        assert!(err < 1e-5, "{err}");
    }
}
