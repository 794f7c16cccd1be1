pub mod checkpoint;
pub mod emoboost;
pub mod embedding;
pub mod error;
pub mod fsutil;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod splits;
pub mod synth;

pub use error::{Error, Result};
