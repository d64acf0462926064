//! Guided policy search with delayed sensor measurements.
//!
//! The crate learns a pouring policy on a simulated cup-and-scale setup whose
//! scale readings lag the true poured mass. Per-trajectory time-varying
//! linear-Gaussian dynamics (with a Gaussian-mixture prior) feed an iLQG
//! optimizer; a small element-wise-product network is regressed onto the
//! optimized trajectories; histories of the last `n` states make the delayed
//! process markovian.

pub mod cli;
pub mod delay;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod gaussian;
pub mod gmm;
pub mod gps;
pub mod policy;
pub mod trajopt;
pub mod types;

pub use error::{Error, Result};
