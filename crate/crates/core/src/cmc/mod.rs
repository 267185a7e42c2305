//! Continual memory convolution: kernels estimated from a shared, masked
//! memory matrix and per-task mixing vectors.

mod layer;
mod mask;
mod memory;

pub use layer::{CmcLayer, LayerGeometry, TaskSlot, TaskVector};
pub use mask::{TaskId, TaskMask};
pub use memory::ContinualMemory;
