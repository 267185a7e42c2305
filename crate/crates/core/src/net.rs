//! Residual restoration network built entirely from CMC layers:
//! `in_conv (3→C)`, `B` blocks of `conv → ReLU → conv` with an identity skip,
//! and `out_conv (C→3)`, optionally added back onto the input.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cmc::{CmcLayer, LayerGeometry, TaskId};
use crate::conv::{conv2d_backward_input, conv2d_backward_params, conv2d_forward};
use crate::error::{Error, Result};
use crate::loss::mse_loss;
use crate::seed::{derive_seed, stream};
use crate::tasks::CHANNELS;
use crate::tensor::{Kernel, Real, Tensor4};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default = "NetConfig::default_channels")]
    pub channels: usize,
    #[serde(default = "NetConfig::default_blocks")]
    pub blocks: usize,
    #[serde(default = "NetConfig::default_kernel_size")]
    pub kernel_size: usize,
    /// CMC capacity t of every layer unless overridden below.
    #[serde(default = "NetConfig::default_capacity")]
    pub capacity: usize,
    #[serde(default)]
    pub first_capacity: Option<usize>,
    #[serde(default)]
    pub last_capacity: Option<usize>,
    /// Adds the network input to the output so layers learn a residual.
    #[serde(default = "NetConfig::default_global_residual")]
    pub global_residual: bool,
    /// Multiplier on the initial memory-entry std; 1.0 starts every new
    /// kernel term at the Kaiming fan-in variance.
    #[serde(default = "NetConfig::default_init_scale")]
    pub init_scale: f64,
}

impl NetConfig {
    fn default_channels() -> usize {
        8
    }
    fn default_blocks() -> usize {
        2
    }
    fn default_kernel_size() -> usize {
        3
    }
    fn default_capacity() -> usize {
        5
    }
    fn default_global_residual() -> bool {
        true
    }
    fn default_init_scale() -> f64 {
        0.1
    }

    /// C=64, B=6, 3×3 with CMC-5 everywhere.
    pub fn full_scale() -> Self {
        Self {
            channels: 64,
            blocks: 6,
            ..Self::default()
        }
    }

    pub fn layer_count(&self) -> usize {
        2 + 2 * self.blocks
    }

    pub fn geometries(&self) -> Vec<LayerGeometry> {
        let (c, n) = (self.channels, self.kernel_size);
        let mut out = vec![LayerGeometry::new(CHANNELS, c, n)];
        out.extend((0..2 * self.blocks).map(|_| LayerGeometry::new(c, c, n)));
        out.push(LayerGeometry::new(c, CHANNELS, n));
        out
    }

    pub fn capacity_of(&self, layer: usize) -> usize {
        let last = self.layer_count() - 1;
        match layer {
            0 => self.first_capacity.unwrap_or(self.capacity),
            l if l == last => self.last_capacity.unwrap_or(self.capacity),
            _ => self.capacity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "network needs channels >= 1 and an odd kernel size, got C={} n={}",
                self.channels, self.kernel_size
            )));
        }
        let caps = [Some(self.capacity), self.first_capacity, self.last_capacity];
        if caps.iter().flatten().any(|&t| t == 0) {
            return Err(Error::Config("CMC capacity must be at least 1".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!(
                "init_scale must be finite and >= 0, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            channels: Self::default_channels(),
            blocks: Self::default_blocks(),
            kernel_size: Self::default_kernel_size(),
            capacity: Self::default_capacity(),
            first_capacity: None,
            last_capacity: None,
            global_residual: Self::default_global_residual(),
            init_scale: Self::default_init_scale(),
        }
    }
}

/// Activations kept from a training forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    kernels: Vec<Kernel<T>>,
    /// Input of every layer, in layer order. Inputs of second block convs
    /// are post-ReLU, which is all the ReLU backward needs.
    inputs: Vec<Tensor4<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestorationNet<T> {
    config: NetConfig,
    layers: Vec<CmcLayer<T>>,
}

fn relu_in_place<T: Real>(t: &mut Tensor4<T>) {
    for v in t.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

impl<T: Real> RestorationNet<T> {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .geometries()
            .into_iter()
            .enumerate()
            .map(|(i, g)| CmcLayer::new(i, g, config.capacity_of(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layers })
    }

    pub(crate) fn from_layers(config: NetConfig, layers: Vec<CmcLayer<T>>) -> Result<Self> {
        config.validate()?;
        let geoms = config.geometries();
        if layers.len() != geoms.len() || layers.iter().zip(&geoms).any(|(l, g)| l.geometry() != *g) {
            return Err(Error::GeometryMismatch {
                archive: describe_layers(&layers),
                config: describe_geoms(&geoms),
            });
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[CmcLayer<T>] {
        &self.layers
    }

    pub fn frozen_through(&self) -> TaskId {
        self.layers[0].frozen_through()
    }

    pub fn active_task(&self) -> Option<TaskId> {
        self.layers[0].active_task()
    }

    pub fn task_ids(&self) -> Vec<TaskId> {
        self.layers[0].tasks().keys().copied().collect()
    }

    /// Allocates masks and initializes parameters for `task_id` in every
    /// layer. A failure in any layer rolls back the layers already started.
    pub fn begin_task(
        &mut self,
        task_id: TaskId,
        fraction: f64,
        layer_fractions: &BTreeMap<usize, f64>,
        sharing: bool,
        seed: u64,
    ) -> Result<()> {
        if let Some(&bad) = layer_fractions.keys().find(|&&l| l >= self.layers.len()) {
            return Err(Error::InvalidParameter(format!(
                "fraction override for layer {bad}, network has {} layers",
                self.layers.len()
            )));
        }
        for i in 0..self.layers.len() {
            let f = layer_fractions.get(&i).copied().unwrap_or(fraction);
            let layer_seed = derive_seed(seed, &[stream::LAYER, i as u64, task_id as u64]);
            if let Err(e) = self.layers[i].begin_task_scaled(task_id, f, sharing, layer_seed, self.config.init_scale) {
                for started in &mut self.layers[..i] {
                    started.abort_task(task_id)?;
                }
                return Err(e);
            }
        }
        Ok(())
    }

    pub fn freeze_task(&mut self, task_id: TaskId) -> Result<()> {
        self.layers.iter_mut().try_for_each(|l| l.freeze_task(task_id))
    }

    pub fn abort_task(&mut self, task_id: TaskId) -> Result<()> {
        self.layers.iter_mut().try_for_each(|l| l.abort_task(task_id))
    }

    /// Adds `extra_rows` of CMC capacity to the chosen layers.
    pub fn expand_capacity(&mut self, layers: &[usize], extra_rows: usize) -> Result<()> {
        if let Some(&bad) = layers.iter().find(|&&l| l >= self.layers.len()) {
            return Err(Error::InvalidParameter(format!("no layer {bad} to expand")));
        }
        if let Some(active) = self.active_task() {
            return Err(Error::Protocol(format!(
                "cannot expand while task {active} is training"
            )));
        }
        for &l in layers {
            self.layers[l].expand_capacity(extra_rows)?;
            let last = self.layers.len() - 1;
            let t = self.layers[l].capacity();
            match l {
                0 => self.config.first_capacity = Some(t),
                l if l == last => self.config.last_capacity = Some(t),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn trainable_params(&self) -> usize {
        self.layers.iter().map(|l| l.total_params()).sum()
    }

    fn run(&self, input: &Tensor4<T>, task_id: TaskId, mut cache: Option<&mut ForwardCache<T>>) -> Result<Tensor4<T>> {
        if input.channels() != CHANNELS {
            return Err(Error::Shape(format!(
                "network input needs {CHANNELS} channels, got {}",
                input.channels()
            )));
        }
        let mut apply = |layer: &CmcLayer<T>, x: &Tensor4<T>| -> Result<Tensor4<T>> {
            let kernel = layer.estimate_kernel(task_id)?;
            let y = conv2d_forward(x, &kernel, layer.bias(task_id)?)?;
            if let Some(c) = cache.as_deref_mut() {
                c.kernels.push(kernel);
                c.inputs.push(x.clone());
            }
            Ok(y)
        };
        let last = self.layers.len() - 1;
        let mut h = apply(&self.layers[0], input)?;
        for b in 0..self.config.blocks {
            let mut a = apply(&self.layers[1 + 2 * b], &h)?;
            relu_in_place(&mut a);
            let r = apply(&self.layers[2 + 2 * b], &a)?;
            h.add_assign(&r)?;
        }
        let mut out = apply(&self.layers[last], &h)?;
        if self.config.global_residual {
            out.add_assign(input)?;
        }
        Ok(out)
    }

    pub fn forward(&self, input: &Tensor4<T>, task_id: TaskId) -> Result<Tensor4<T>> {
        self.run(input, task_id, None)
    }

    pub fn forward_train(&self, input: &Tensor4<T>, task_id: TaskId) -> Result<(Tensor4<T>, ForwardCache<T>)> {
        let mut cache = ForwardCache {
            kernels: Vec::with_capacity(self.layers.len()),
            inputs: Vec::with_capacity(self.layers.len()),
        };
        let out = self.run(input, task_id, Some(&mut cache))?;
        Ok((out, cache))
    }

    /// Gradient of the loss with respect to the active task's flat parameters,
    /// given the gradient at the network output.
    pub fn backward(&self, task_id: TaskId, cache: &ForwardCache<T>, grad_out: &Tensor4<T>) -> Result<Vec<T>> {
        let n_layers = self.layers.len();
        let mut per_layer: Vec<Vec<T>> = vec![Vec::new(); n_layers];
        let mut layer_grads = |l: usize, g: &Tensor4<T>| -> Result<()> {
            let (gk, gb) = conv2d_backward_params(&cache.inputs[l], &cache.kernels[l], g)?;
            per_layer[l] = self.layers[l].backward_masked(task_id, &gk, &gb)?;
            Ok(())
        };
        let last = n_layers - 1;
        layer_grads(last, grad_out)?;
        let mut g_h = conv2d_backward_input(&cache.kernels[last], grad_out)?;
        for b in (0..self.config.blocks).rev() {
            let (l1, l2) = (1 + 2 * b, 2 + 2 * b);
            layer_grads(l2, &g_h)?;
            let mut g_a = conv2d_backward_input(&cache.kernels[l2], &g_h)?;
            for (g, &r) in g_a.data_mut().iter_mut().zip(cache.inputs[l2].data()) {
                if r <= T::zero() {
                    *g = T::zero();
                }
            }
            layer_grads(l1, &g_a)?;
            g_h.add_assign(&conv2d_backward_input(&cache.kernels[l1], &g_a)?)?;
        }
        layer_grads(0, &g_h)?;
        Ok(per_layer.concat())
    }

    pub fn active_param_len(&self, task_id: TaskId) -> Result<usize> {
        self.layers.iter().map(|l| l.active_param_len(task_id)).sum()
    }

    /// Active parameters of every layer, concatenated in layer order.
    pub fn active_params(&self, task_id: TaskId) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(self.active_param_len(task_id)?);
        for l in &self.layers {
            out.extend(l.active_params(task_id)?);
        }
        Ok(out)
    }

    pub fn set_active_params(&mut self, task_id: TaskId, params: &[T]) -> Result<()> {
        let expected = self.active_param_len(task_id)?;
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "network expects {expected} active params, got {}",
                params.len()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let len = l.active_param_len(task_id)?;
            l.set_active_params(task_id, &params[offset..offset + len])?;
            offset += len;
        }
        Ok(())
    }

    /// MSE loss of the active task on one batch and its parameter gradient.
    pub fn loss_and_grads(&self, task_id: TaskId, input: &Tensor4<T>, target: &Tensor4<T>) -> Result<(T, Vec<T>)> {
        let (out, cache) = self.forward_train(input, task_id)?;
        let (loss, grad_out) = mse_loss(&out, target)?;
        let grads = self.backward(task_id, &cache, &grad_out)?;
        Ok((loss, grads))
    }
}

fn describe_geoms(geoms: &[LayerGeometry]) -> String {
    let parts: Vec<String> = geoms.iter().map(|g| g.to_string()).collect();
    format!("{} layers [{}]", geoms.len(), parts.join(", "))
}

fn describe_layers<T: Real>(layers: &[CmcLayer<T>]) -> String {
    describe_geoms(&layers.iter().map(|l| l.geometry()).collect::<Vec<_>>())
}
