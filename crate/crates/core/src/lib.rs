pub mod datasets;
pub mod encoder;
pub mod classifier;
pub mod error;
pub mod harness;
pub mod memory_hub;
pub mod numerics;
pub mod prompt_bank;
pub mod weights;

pub use error::{MitpError, Result};
