//! Dense tensors, the denoiser network, Adam and seeded random streams.

mod adam;
pub mod checkpoint;
mod denoiser;
mod params;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::Checkpoint;
pub use denoiser::{
    denoiser_backward, denoiser_forward, time_embedding, Activation, Denoiser, DenoiserConfig, DenoiserTape,
};
pub use params::{Gradients, Params};
pub use rng::{draw_standard_normal, RngStream};
pub use tensor::Tensor2;
