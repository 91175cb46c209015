//! Model-based reinforcement learning with latent world models and
//! occupancy-entropy exploration, on small vector-observation environments.
//!
//! The crate trains a recurrent latent world model from replayed experience,
//! imagines differentiable rollouts through it, estimates the discounted
//! occupancy of latent states with a mixture density network, and feeds the
//! resulting entropy bonus to a stochastic exploration actor while a
//! deterministic actor learns to exploit. Everything runs on a small f64
//! tape-autodiff engine so analytic gradients can be checked against finite
//! differences end to end.

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod trainer;
pub mod world_model;
pub mod nn;
pub mod occupancy;
pub mod rollout;

pub use error::{Error, Result};
