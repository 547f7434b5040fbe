//! Susceptibility mapping for spatio-temporal outbreak data.
//!
//! Units are geolocated points with a binary outbreak history. Transmission
//! follows a discrete-time SIS model with a power-law distance kernel, and
//! each unit carries a susceptibility `beta_i` that scales the force of
//! infection it receives. The crate simulates such data and infers the
//! susceptibility field under three priors:
//!
//! * independent exponential susceptibilities (ISM),
//! * a log-Gaussian process with exponential covariance (SDSM),
//! * a reduced-rank SDSM on a Moran eigenvector basis over a triangular
//!   mesh (PICAR).
//!
//! Background rate and kernel range are estimated first ([`twostep`]), then
//! held fixed while the susceptibilities are sampled by MCMC ([`mcmc`],
//! [`picar`]). [`modelchoice`] decides between the independent and the
//! spatial prior from a correlogram of per-unit cross-entropy, and
//! [`evaluate`] holds the held-out metrics and the benchmark harness.

pub mod epimodel;
pub mod error;
pub mod evaluate;
pub mod linalg;
pub mod mcmc;
pub mod modelchoice;
pub mod picar;
pub mod rng;
pub mod simulate;
pub mod spatial;
pub mod twostep;

pub use epimodel::{BackgroundRate, OutbreakPanel, SusceptibilityField};
pub use error::{Error, Result};
pub use spatial::{DistanceMatrix, KernelParams, SpatialUnits};

pub use nalgebra;
