//! Data unlearning for diffusion models on toy data.
//!
//! The crate bundles a variance-preserving diffusion process, a small MLP
//! noise predictor, the unlearning objectives (vanilla, NegGrad, EraseDiff,
//! SISS and the importance-sampled, k-NN truncated retracking loss), the
//! closed-form optimal denoiser of a finite dataset, and the metrics used to
//! compare them. Everything is generic over [`Scalar`]; the `*64` and `*32`
//! aliases fix the precision.

// `!(x > 0.0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod scalar;
pub mod stats;
pub mod trainer;
pub mod verify;

pub use diffusion::{ancestral_sample, forward_sample, log_q, make_schedule, nll_elbo, sample_batch, NoiseSchedule, Trajectory};
pub use error::{Error, Result};
pub use losses::{compute_loss, LossSample, LossSpec, Method, NeighborIndex, SplitDataset};
pub use model::{NoisePredictor, Trainable, ZeroPredictor};
pub use numerics::{AdamState, Checkpoint, Denoiser, DenoiserConfig, Params, RngStream, Tensor2};
pub use oracle::{optimal_eps, GaussianMixtureSpec, OracleDenoiser, ResidualOverOracle};
pub use scalar::Scalar;

pub type Tensor64 = Tensor2<f64>;
pub type Tensor32 = Tensor2<f32>;
pub type Schedule64 = NoiseSchedule<f64>;
pub type Schedule32 = NoiseSchedule<f32>;
pub type Denoiser64 = Denoiser<f64>;
pub type Denoiser32 = Denoiser<f32>;
pub type Dataset64 = SplitDataset<f64>;
pub type Dataset32 = SplitDataset<f32>;
pub type Oracle64 = OracleDenoiser<f64>;
pub type Oracle32 = OracleDenoiser<f32>;
