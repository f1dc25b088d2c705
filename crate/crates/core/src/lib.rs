//! Control-conditioned GRU/LSTM cells for virtual-analog audio modeling,
//! with parametrizations that keep the autonomous dynamics asymptotically
//! stable around a zero equilibrium, and tooling to train models and measure
//! conditioning-induced output noise.

pub mod cells;
pub mod cli;
pub mod constraints;
pub mod datasets;
pub mod error;
pub mod measurement;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
