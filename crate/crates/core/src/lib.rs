//! Offline reinforcement learning toolkit for sepsis treatment policies:
//! a synthetic cohort simulator with exact dynamic-programming oracles, a
//! preprocessing pipeline, recurrent state encoding, a learned reward model,
//! kernel and deep-Q experts combined by a trained gating function, and
//! weighted doubly-robust off-policy evaluation.

pub mod config;
pub mod encoder;
pub mod error;
pub mod experts;
pub mod features;
pub mod gate;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod reward;
pub mod runner;
pub mod sim;
pub mod wdr;
