//! Filtering for a cavity whose Hamiltonian is modulated by a classical
//! Ornstein-Uhlenbeck disturbance.
//!
//! The disturbance `q` is replaced by the real quadrature of an auxiliary
//! damped cavity, `q ~ Q2 / alpha`. The resulting two-cavity open system is
//! monitored by homodyne detection on the first cavity's output and filtered
//! two ways:
//!
//! * [`sme`]: the exact stochastic master equation filter on a truncated Fock
//!   space, also used to unravel "truth" trajectories and their records.
//! * [`qekf`]: a quantum extended Kalman filter on the quadrature vector
//!   `(Q1, P1, Q2, P2)` with a Riccati covariance.
//!
//! [`experiment`] ties both to a seeded, reproducible ensemble runner that
//! writes CSV output.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod classical;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod model;
pub mod operators;
pub mod parallel;
pub mod qekf;
pub mod rng;
pub mod sme;

pub use error::{Error, Result};
