//! Group-relative policy optimization for small flow matching models, with
//! step-wise dense rewards from ODE completion and reward-aware calibration
//! of the SDE exploration noise.
//!
//! Modules, bottom-up: [`numerics`] (MLP, AdamW, RNG), [`flow_model`]
//! (velocity field and pretraining), [`samplers`] (ODE/SDE steps and
//! rollouts), [`reward_models`], [`dense_reward`], [`calibration`],
//! [`grpo`], and [`harness`] (config, checkpoints, CSV/SVG output, CLI).

pub mod calibration;
pub mod dense_reward;
pub mod error;
pub mod flow_model;
pub mod grpo;
pub mod harness;
pub mod numerics;
pub mod reward_models;
pub mod samplers;

pub use error::{FlowError, Result};
