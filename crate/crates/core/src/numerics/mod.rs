//! Dense numerical kernel: parameter storage, a tanh MLP with exact
//! gradients, AdamW, finite-difference oracles and counter-based RNG.

pub mod adam;
pub mod finite_diff;
pub mod mlp;
pub mod params;
pub mod rng;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use finite_diff::{finite_diff_gradient, relative_error};
pub use mlp::{mlp_backward, mlp_backward_accumulate, mlp_backward_with, mlp_forward, Activation, MlpGradient, NetworkShape};
pub use params::{ParameterVector, Segment};
pub use rng::{stream_key, RngStream};
