//! Compiler passes and a leveled fixed-point simulator for polynomial CNNs
//! targeting CKKS-style homomorphic inference.

pub mod cluster;
pub mod error;
pub mod graph;
pub mod levels;
pub mod poly;
pub mod sim;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
