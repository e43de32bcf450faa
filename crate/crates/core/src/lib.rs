//! Next-generation reservoir computing (NGRC) for the magnetic pendulum.
//!
//! The crate is organised bottom-up:
//!
//! * [`dynamics`]: the ground-truth pendulum ODE, RK4 integration, flow maps and
//!   attractor classification.
//! * [`features`]: NGRC feature libraries and design-matrix assembly.
//! * [`model`]: ridge-regression training and autonomous prediction.
//! * [`diagnostics`]: conditioning, principal angles, flow-surface fitting error,
//!   transverse distance and the Adams–Bashforth reference readout.
//! * [`harness`]: configuration, seeded sweeps and file outputs used by the CLI.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the `parallel`
//! feature is enabled and falls back to plain iterators otherwise.

pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod features;
pub mod harness;
pub mod model;
pub mod par;
pub mod seed;

pub use error::{Error, Result};
