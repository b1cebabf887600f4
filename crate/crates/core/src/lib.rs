//! Spatio-temporal visual token compression toolkit.

pub mod cli;
pub mod compression;
pub mod config;
pub mod costmodel;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
