//! File formats, host latency measurement and the pipeline commands built
//! on `gatecrush-core`.

pub mod checkpoint;
pub mod cifar;
pub mod config;
pub mod error;
pub mod latency;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
