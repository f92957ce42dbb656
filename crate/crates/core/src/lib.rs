pub mod cli;
pub mod diffcore;
pub mod error;
pub mod flownet;
pub mod harness;
pub mod sampler;
pub mod scenario;
pub mod seed;
pub mod vocab;

pub use error::{Error, Result};
