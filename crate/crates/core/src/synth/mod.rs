//! Procedural scenes whose captions depend on attributes that only specific
//! experts can see.

pub mod grammar;
pub mod render;
pub mod scene;
pub mod splits;

pub use grammar::{CaptionEntry, CaptionGrammar, TokenKind};
pub use render::{render, RenderedSample, SourceChannel};
pub use scene::{generate_scene, Family, Object, Scene};
pub use splits::{make_splits, Dataset, HoldoutRule};
