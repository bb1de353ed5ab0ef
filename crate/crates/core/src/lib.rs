//! Stochastic localization toolkit for log-concave measures.

pub mod config;
pub mod constants;
pub mod coupling;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod isoperimetry;
pub mod linalg;
pub mod measures;
pub mod noise;
pub mod points;
pub mod quadrature;
pub mod runner;
pub mod stats;
pub mod tilt;

pub use error::{Error, Result};
