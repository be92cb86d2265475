//! Multi-view fusion classifier over pluggable text/image encoders.
//!
//! A sample is encoded into token rows, a text summary `t_CLS`, patch rows
//! and an image summary `v_CLS`. Three views each produce a two-class
//! distribution: the text view from `t_CLS`, the image view from `v_CLS`, and
//! the interaction view from a fused vector built by one of the
//! [`InteractionKind`]s. Late fusion adds the three distributions.

pub mod checkpoint;
pub mod embfile;
pub mod provider;
mod views;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use provider::{
    EmbeddingProvider, Encoded, FileProvider, ImageEncoding, ProviderConfig, ProviderMode,
    TextEncoding, ToyConfig, ToyProvider,
};
pub use views::*;
