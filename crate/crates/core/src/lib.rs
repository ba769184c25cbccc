//! Joint photon-number statistics of a lossy multimode twin-beam source.
//!
//! The crate is `no_std` (with `alloc`) and purely computational:
//!
//! * [`model`]: the generating-function forward model, from multimode
//!   squeezing parameters down to the joint distribution `rho[n][m]`, plus an
//!   independent pair-thinning construction used as a cross-check.
//! * [`loop_detector`]: conditional click matrices of a time-multiplexed
//!   detector with `B` binary paths, click sampling and calibration.
//! * [`reconstruction`]: maximum-likelihood (EM) inversion of click
//!   histograms back to photon-number statistics.
//! * [`analysis`]: equivalent mode number, the `delta^2` efficiency witness,
//!   contamination parameters and contamination maps.
//! * [`sampling`]: seeded Monte Carlo of pulses, clicks and calibration runs.
//!
//! File formats, parallel orchestration and the command-line front end live in
//! the companion `twinbeam` crate.
#![no_std]
// `!(x > 0.0)` deliberately treats NaN as invalid.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod error;
pub mod loop_detector;
pub mod matrix;
pub mod model;
pub mod reconstruction;
pub mod sampling;

mod sum;

pub use error::{Error, Result};
pub use matrix::Matrix;
