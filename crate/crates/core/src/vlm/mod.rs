//! Frozen toy vision encoder, caption decoder and the end-to-end model.

pub mod caption;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod model;

pub use caption::TokenizedCaption;
pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use decoder::Decoder;
pub use encoder::VisionEncoder;
pub use model::{ExpertModules, ForwardOptions, ForwardOut, Mode, SampleCache, ToveModel};
