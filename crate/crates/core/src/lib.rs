pub mod error;
pub mod harness;
pub mod merge;
pub mod hub;
pub mod numerics;
pub mod objectives;
pub mod routing;
pub mod synth;
pub mod vlm;

pub use error::{Error, Result};
