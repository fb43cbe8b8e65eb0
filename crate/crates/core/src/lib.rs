//! Multi-model federated learning (MMFL) simulation engine.
//!
//! Several unrelated models are trained concurrently over one client
//! population. Every client owns a number of *processors*, each of which can
//! train at most one model per global round. The server draws a per-round
//! sampling plan `p[s | (i, b)]` under an expected upload budget `m` and
//! aggregates the sampled updates with inverse-probability weights so the
//! step is an unbiased estimate of full participation.
//!
//! The crate provides:
//!
//! * [`domain`]: topology, processors and data weights,
//! * [`synthdata`]: non-IID synthetic classification data (label sharding
//!   plus high/low data tiers),
//! * [`models`]: softmax-linear and MLP models with analytic gradients and
//!   the mini-batch local trainer,
//! * [`sampling`]: uniform, loss-based and update-based optimal sampling
//!   plans (closed-form KKT solution with the saturated-set search),
//! * [`staleness`]: stale-update memory and optimal staleness coefficients,
//! * [`engine`]: the round protocol, aggregation rules and metrics,
//! * [`oracle`]: brute-force verifiers for every closed form,
//! * [`config`], [`experiment`], [`verify`]: run configuration, experiment
//!   driver and the verification suites behind the `mmfl` binary.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which is what the experiment
//! driver uses.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod domain;
pub mod engine;
mod error;
pub mod experiment;
pub mod models;
pub mod oracle;
pub mod rng;
pub mod sampling;
mod scalar;
pub mod staleness;
pub mod synthdata;
pub mod verify;

pub use error::{MmflError, Result};
pub use scalar::Scalar;

pub use domain::{ClientProfile, ProcessorRef};

pub type SystemTopology = domain::SystemTopology<f64>;
pub type SamplingPlan = sampling::SamplingPlan<f64>;
pub type MagnitudeTable = sampling::MagnitudeTable<f64>;
pub type WeightVector = models::WeightVector<f64>;
pub type ClientDataset = synthdata::ClientDataset<f64>;
pub type StaleStore = staleness::StaleStore<f64>;
pub type Simulation = engine::Simulation<f64>;
