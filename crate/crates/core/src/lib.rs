pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod error;
pub mod extraction;
pub mod fields;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod report;
pub mod sampling;
pub mod scene;
pub mod train;

pub use error::{Error, ErrorKind, Result};
