//! Joint active-device detection and channel estimation for asynchronous
//! grant-free massive access, using GAMP with sparsity-rate updates and
//! dynamic message scheduling.
//!
//! The crate is organised bottom-up:
//!
//! - [`system_model`]: pilots, bursty activity, fading channels, windows and
//!   the received signal.
//! - [`denoisers`]: scalar Bernoulli-Gaussian and AWGN estimators plus the
//!   activity LLR chain.
//! - [`engine`]: the iterative estimator over a scheduled set of devices.
//! - [`scheduling`]: full-parallel, AUD, RBP, ARBP and oracle policies.
//! - [`metrics`]: NMSE, activity error rates and aggregation.
//! - [`harness`]: seeded Monte Carlo experiments with CSV output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod denoisers;
pub mod engine;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod scheduling;
pub mod system_model;

pub use engine::{run, EngineConfig, Estimate, EstimatorState, IterationRecord, StopSet, Truth};
pub use rng::RandomStream;
pub use scheduling::{ScheduleSet, Scheduler, SchedulerKind, SetOrigin};
pub use system_model::{Observation, PilotMatrix, SystemConfig};

use thiserror::Error;

/// An argument outside the domain of a scalar estimator.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("{name} must be > 0, got {value}")]
    NonPositiveVariance { name: &'static str, value: f64 },
    #[error("{name} must be >= 0, got {value}")]
    NegativeVariance { name: &'static str, value: f64 },
    #[error("{name} must be a probability in the admissible range, got {value}")]
    Probability { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("`{key}` out of range: requires {constraint}")]
    OutOfRange { key: &'static str, constraint: String },
    #[error("`{key}`: cannot parse {value:?} as {expected}")]
    Parse {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("unknown key `{key}`; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown scheduler `{0}`; valid: full, aud, rbp, arbp, oracle-full, oracle-arbp")]
    UnknownScheduler(String),
}
