//! Polytunnel crop-yield toolkit: sensor-series reconstruction from
//! external weather via tree-ensemble backcasting, plus weekly yield
//! forecasting over real and synthetic data.

pub mod config;
pub mod correlate;
pub mod ensemble;
pub mod error;
pub mod evaluate;
pub mod frame;
pub mod ingest;
pub mod pipeline;
pub mod preprocess;
pub mod synthworld;
pub mod windowing;

pub mod testutil;

pub use error::{Error, Result};
