pub mod ablation;
pub mod ami;
pub mod cli;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod head;
pub mod model;
pub mod synthgen;
pub mod tensor;
pub mod tracker;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
