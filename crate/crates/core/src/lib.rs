pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod decoder;
pub mod error;
pub mod exec;
pub mod export;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prompts;
pub mod rng;
pub mod segmentor;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
