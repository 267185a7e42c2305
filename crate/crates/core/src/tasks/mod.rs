//! Synthetic restoration tasks: clean image sources, degradation generators
//! and deterministic (degraded, clean) patch streams.

mod degrade;
mod image;
mod source;
mod stream;

pub use degrade::{
    add_noise, block_quantize, degrade, gaussian_blur, gaussian_kernel_2d, gaussian_taps, quant_table, reflect,
    Degradation,
};
pub use image::{Image, CHANNELS};
pub use source::{procedural_image, CleanImageSource};
pub use stream::{make_pair_stream, EvalSet, PairBatch, PairStream};
