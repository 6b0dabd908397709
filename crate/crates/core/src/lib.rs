//! Scene-graph-guided vision-language pre-training at desk scale.
//!
//! The pipeline runs caption text through a rule-based scene-graph parser
//! ([`scenegraph`]), tokenizes it with WordPiece and aligns graph nodes to
//! token spans ([`textproc`]), pairs it with region features ([`corpus`]),
//! builds node-typed masked pre-training instances ([`masking`]) and trains a
//! two-stream co-attention transformer ([`model`], [`numerics`], [`train`]).
//! [`eval`] runs the cross-modal cloze test and image-text matching accuracy.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod scenegraph;
pub mod seed;
pub mod textproc;
pub mod train;
pub mod util;

#[cfg(test)]
mod testkit;

pub use corpus::{ImageRecord, CaptionRecord, Region, RegionBox, GeneratorConfig, SyntheticCorpus};
pub use error::{Error, Result};
pub use eval::{ClozeItem, ClozeReport};
pub use masking::{Batch, MaskingPolicy, PretrainInstance, Task};
pub use model::{Checkpoint, LossBreakdown, Model, ModelConfig, StreamConfig};
pub use scenegraph::{ParserLexicon, SceneGraph};
pub use textproc::{AlignedCaption, Vocab};
pub use train::{AblationMode, Dataset, Splits, TrainConfig};
