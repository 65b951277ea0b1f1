//! Uncertainty-aware cooperative planning for connected autonomous vehicles.

pub mod calibration;
pub mod engine;
pub mod fusion;
pub mod geometry;
pub mod metrics;
pub mod numfmt;
pub mod planning;
pub mod protocol;
pub mod scenario;
