//! Delay-adaptive stochastic approximation for a parameter server with
//! asynchronously delayed up-links.
//!
//! The crate is organised bottom-up:
//!
//! - [`aggregation`]: the median-filtered delay-adaptive direction rule and
//!   the non-adaptive baselines.
//! - [`delay`]: staleness schedules, the up-link arrival process and
//!   average-delay statistics.
//! - [`markov`]: finite ergodic chains, per-agent sampling streams and
//!   total-variation mixing times.
//! - [`td`]: problem instances (TD(0) with linear features, small linear SA
//!   problems) and their constants.
//! - [`sim`]: the server/agents loop, traces and replication.
//! - [`experiment`] and [`verify`]: configuration files, sweeps and the
//!   invariant suites driven by the `dasa` binary.

// Negated comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod delay;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod markov;
pub mod seed;
pub mod sim;
pub mod td;
pub mod verify;

pub use error::{Error, Result};
pub use exec::ExecMode;

/// Dense real vector used for parameters and operator values.
pub type Vector = nalgebra::DVector<f64>;
/// Dense real matrix.
pub type Matrix = nalgebra::DMatrix<f64>;
