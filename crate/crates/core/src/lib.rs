//! Toy-scale laboratory for attractor-basin accounts of model memory.

pub mod detect;
pub mod error;
pub mod geometry;
pub mod jacobian;
pub mod metacog;
pub mod nnkit;
pub mod scalinglaw;
pub mod seed;
pub mod stats;
pub mod taskgen;

pub use error::{Error, Result};
