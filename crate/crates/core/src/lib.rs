//! Continual memory convolution: layers whose kernels are estimated from a
//! shared, task-partitioned memory matrix, a residual restoration network
//! built from them, sequential task training, synthetic restoration tasks,
//! cost accounting and the knowledge-base archive format.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod archive;
pub mod bench;
pub mod cmc;
pub mod config;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod report;
pub mod seed;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Kernel, Real, Tensor4};
