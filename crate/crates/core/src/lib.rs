//! Cluster Monte Carlo simulation of driven, dipolar-coupled NV spin ensembles
//! in an Ornstein–Uhlenbeck spin bath.
//!
//! The crate is organized bottom-up:
//!
//! * [`spin`]: Hilbert-space linear algebra for clusters of up to 10 spins.
//! * [`model`]: dipolar, bath and drive Hamiltonians.
//! * [`noise`]: exact OU bath trajectories.
//! * [`ensemble`]: geometries, coupling distributions and cluster draws.
//! * [`sequences`]: control schedules and average Hamiltonians.
//! * [`engine`]: single-cluster evolution and ensemble averaging.
//! * [`analytic`]: closed-form equal-coupling dynamics.
//! * [`analysis`]: spectra, peak extraction and decay fits.

pub mod analysis;
pub mod analytic;
pub mod engine;
pub mod ensemble;
pub mod error;
pub mod model;
pub mod noise;
pub mod seed;
pub mod sequences;
pub mod spin;

pub use error::{Error, Result};
