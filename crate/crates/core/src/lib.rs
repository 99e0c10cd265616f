//! Transit load forecasting from automatic passenger counter data.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! * [`ingest`] reads APC, weather, traffic, calendar and GTFS files,
//! * [`synth`] generates a seeded synthetic city with known ground truth,
//! * [`clean`] drops invalid trips and re-derives occupancy,
//! * [`fuse`] joins context data and aggregates trip and stop rows,
//! * [`features`] encodes rows and builds splits and sequences,
//! * [`gbt`] and [`seq2seq`] are the trip- and stop-level models,
//! * [`baselines`] and [`eval`] provide the comparisons and metrics.

pub mod baselines;
pub mod clean;
pub mod domain;
pub mod error;
pub mod eval;
pub mod features;
pub mod fuse;
pub mod gbt;
pub mod geo;
pub mod ingest;
pub mod pipeline;
pub mod seq2seq;
pub mod svg;
pub mod synth;

pub use error::{Error, Result};
