//! Conformally calibrated Hamilton-Jacobi safety filters.
//!
//! The crate is `no_std` (with `alloc`) and covers the numerical side of the
//! framework:
//!
//! - [`system`]: the discrete-time control-system contract, plus the built-in
//!   double integrator and Dubins car in [`systems`].
//! - [`highway`]: the ten-dimensional triple-vehicle highway takeover task.
//! - [`grid`]: exact grid dynamic programming for the discounted safety value
//!   function, used as ground truth on low-dimensional systems.
//! - [`mlp`] and [`learn`]: neural value functions trained by fitted safety
//!   value iteration, and their greedy safe policies.
//! - [`conformal`]: calibration sets, one-sided nonconformity scores, conformal
//!   quantiles and the calibrated lower bound.
//! - [`filter`]: single-model and ensemble switched safety filters.
//! - [`certify`]: trajectory-level Beta certification and the incomplete beta
//!   numerics behind it.
//!
//! IO, file formats and the experiment driver live in the `hjcp` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod certify;
pub mod conformal;
pub mod episode;
pub mod error;
pub mod filter;
pub mod grid;
pub mod highway;
pub mod learn;
pub mod mlp;
pub mod rng;
pub mod system;
pub mod systems;
pub mod value;

pub use error::{Error, Result};
pub use system::{Bounds, Control, ControlGrid, ControlSystem, Environment, State};
pub use value::ValueFunction;
