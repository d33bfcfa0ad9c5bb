//! Compound twin-beam photocount statistics.
//!
//! Forward models for weak photon-pair beams seen by on/off detectors,
//! a Monte Carlo click-stream generator, grouping of windows into compound
//! fields, EM photon-number reconstruction, moment-based non-classicality
//! measures, integrated-intensity quasi-distributions and sub-shot-noise
//! precision estimators.

pub mod cli;
pub mod detection;
pub mod error;
pub mod formats;
pub mod ingest;
pub mod metrology;
pub mod model;
pub mod moments;
pub mod presets;
pub mod quasidist;
pub mod reconstruct;
pub mod simulate;

pub use error::{Error, Result};
