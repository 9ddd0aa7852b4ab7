//! Learnable residual encoding layer (Deep-TEN style) with its analytic
//! backward pass, the classic encoders it generalizes, and a small trainer
//! for orderless classification of descriptor sets.

pub mod cli;
pub mod config;
pub mod data;
pub mod encoding;
pub mod error;
pub mod gradcheck;
pub mod matrix;
pub mod network;
pub mod reference;
pub mod rng;

pub use error::{Error, Result};
