//! Fine-tuning stability lab: a tiny transformer trained with tape autodiff,
//! AdamW with optional component-wise gradient norm clipping, gradual
//! unfreezing schedules, and the telemetry and multi-seed harness used to
//! compare them.

pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod schedule;
pub mod seed;
pub mod telemetry;

pub use error::{Error, Result};
