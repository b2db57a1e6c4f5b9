//! Neighborhood-preserving bottleneck layers and the tooling to train,
//! attack, compress, and analyze networks that use them.

pub mod analysis;
pub mod attack;
pub mod autodiff;
pub mod bottleneck;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod network;
pub mod special;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
