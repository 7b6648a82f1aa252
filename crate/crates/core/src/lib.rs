//! Weight-space world model over implicit neural representations.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod dynamics;
pub mod encoder;
pub mod error;
mod gemm;
pub mod inr;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rollout;
pub mod synthdata;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
