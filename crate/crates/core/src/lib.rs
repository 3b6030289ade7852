//! Distribution-network-safe flexibility dispatch for fleets of storage and
//! demand-response assets on radial feeders.
//!
//! The crate provides, bottom up:
//!
//! - [`grid`]: radial network model and an exact branch-flow power-flow solver;
//! - [`der`]: battery storage dynamics and building demand-response models;
//! - [`env`]: the episodic multi-agent dispatch environment combining both;
//! - [`nn`]: a minimal feed-forward network toolkit with backprop and Adam;
//! - [`regressor`]: a multi-output linear voltage predictor trained on
//!   power-flow data;
//! - [`qp`] / [`safety`]: a dense dual active-set QP solver and the safety
//!   layer that projects joint actions onto the predicted-safe polytope;
//! - [`marl`]: multi-agent deterministic policy-gradient training with
//!   centralized critics, plus the penalty-only baseline;
//! - [`oracle`]: a perfect-foresight dispatch benchmark on a linearized
//!   network model;
//! - [`synth`]: deterministic synthetic price and load profile generation.

pub mod der;
pub mod env;
pub mod grid;
// pub mod marl;
pub mod nn;
// pub mod oracle;
pub mod qp;
pub mod regressor;
// pub mod safety;
pub mod synth;
