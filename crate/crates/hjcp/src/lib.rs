//! Experiment driver for conformally calibrated HJ safety filters: run
//! configuration, versioned artifacts, and the `train`, `calibrate`, `eval`,
//! `certify`, `oracle` and `report` commands.

pub mod commands;
pub mod config;
pub mod store;
pub mod studies;

pub use config::RunConfig;
pub use store::{Store, StoreError};
