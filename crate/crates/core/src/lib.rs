//! Explainable multi-agent reinforcement learning via saliency masks.
//!
//! PPO agents carry a second "mask" network that scores each observation;
//! low-scoring states have their actions randomized during rollouts, and the
//! reward deviation this causes drives both mask training and critical-state
//! identification. Agents share discovered critical states through a bounded
//! buffer that steers exploration away from already-covered regions.
//!
//! Module map:
//! - [`nn`]: dense networks with analytic backprop and Adam
//! - [`env`]: multi-agent environments (chain oracle, connect-four, highway)
//! - [`ppo`]: GAE and the clipped-surrogate policy update
//! - [`masking`]: mask evaluation, gated action selection, mask training,
//!   and perturbation-based critical-state identification
//! - [`collab`]: epsilon schedules, comm-set union, and the shared buffer
//! - [`metrics`]: KL / fidelity / reward-drop evaluation metrics
//! - [`harness`]: experiment orchestration, sweeps, persistence, plots

pub mod collab;
pub mod env;
pub mod error;
pub mod harness;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod ppo;
pub mod rng;

pub use error::{Error, Result};
