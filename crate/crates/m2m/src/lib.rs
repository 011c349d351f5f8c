//! Multi-scenario multi-task count prediction.
//!
//! One model serves several deployment scenarios (storefronts differing in
//! traffic scale and user mix) and several prediction targets (daily page
//! views, clicks, spend, and so on) at once. Instead of replicating towers
//! per scenario, a compact scenario representation drives a weight generator
//! that rewrites parts of the network per sample: attention over a shared
//! expert bank and residual readout towers both run with generated weights.
//!
//! The crate is self-contained: a small reverse-mode tape ([`tensor`]), the
//! model family, a calibrated synthetic data generator, and the training and
//! evaluation harness behind the `m2m` binary.

pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod features;
pub mod hash;
pub mod meta;
pub mod model;
pub mod tensor;
pub mod train;
