//! Building blocks for multimodal sarcasm detection experiments.
//!
//! - [`corpus`]: canonical JSONL records, split bookkeeping, statistics, and
//!   stratified subsampling.
//! - [`debias`]: hashtag and emoji-word cue detection, removal, and the
//!   class-conditional cue statistics.
//! - [`numeric`]: a small dense tensor engine with reverse-mode gradients and
//!   a finite-difference checker.
//! - [`model`]: embedding providers and the text / image / interaction view
//!   classifier with late fusion.
//! - [`train`]: AdamW training, metrics, and the experiment harnesses.

pub mod corpus;
pub mod debias;
mod error;
pub mod model;
pub mod numeric;
pub mod train;

pub(crate) mod hash;

pub use error::{Error, Result};
