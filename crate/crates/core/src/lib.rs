pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod model;
pub mod objectives;
pub mod phonemap;
pub mod train;
pub mod window;

pub use error::{Error, Result};
