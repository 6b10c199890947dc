//! Covert communication over federated-learning gradient updates.
//!
//! A sender participant hides a coded payload inside its model update using
//! direct-sequence spread-spectrum coding; the receiver recovers it from the
//! global model by correlating against the shared spreading codes. The crate
//! bundles everything needed to run the whole loop at desk scale:
//!
//! - [`nn`]: a small MLP with manual backprop, synthetic data, non-iid shards
//! - [`fl`]: federated averaging, participant selection, gradient sources
//! - [`cdma`]: spreading plans, gain control, embedding and correlation
//! - [`ldpc`]: rate-1/2 LDPC construction, encoding, belief propagation
//! - [`framing`]: payload <-> transmitted frame conversion with pilot bits
//! - [`detection`]: the observer's toolkit (KS test, update-norm analysis)
//! - [`experiment`]: configuration, the round loop, logging, reports
//!
//! All operations are deterministic functions of their inputs and seeds.

// Validation guards use `!(x > 0.0)` so NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cdma;
pub mod cli;
pub mod detection;
pub mod experiment;
pub mod fl;
pub mod framing;
pub mod ldpc;
pub mod nn;
pub mod prng;

/// Flat model parameter vector, layer-major layout (see [`nn`]).
pub type ParamVec = Vec<f64>;
/// A participant's submitted update, same length and layout as [`ParamVec`].
pub type UpdateVec = Vec<f64>;
