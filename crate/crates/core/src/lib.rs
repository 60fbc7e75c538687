pub mod accounting;
pub mod aggregate;
pub mod error;
pub mod estimators;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod scenarios;
pub mod simkit;
pub mod stats;
pub mod structural;
pub mod types;
pub mod validate;

pub use error::{Error, Result};
pub use types::*;
