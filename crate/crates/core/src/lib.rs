pub mod active;
pub mod bank;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod flow;
pub mod ingest;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod sim;
pub mod synth;
pub mod trajectory;
pub mod trajio;

pub use error::{Error, Result};
