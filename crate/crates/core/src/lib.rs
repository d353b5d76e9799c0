//! Split deep joint source-channel coding over a trainable array of binary
//! symmetric channels.
//!
//! A source codec maps images to bit probabilities and is trained against a
//! learnable BSC interface whose per-position crossover probabilities are
//! exported as an [`InterfaceSpec`]. A channel codec is then trained against
//! the frozen source codec, reading the interface to steer its features.

pub mod artifacts;
pub mod bits;
pub mod channel;
pub mod channel_codec;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod interface;
pub mod metrics;
pub mod nn;
pub mod source;

pub use bits::{binarize, BitProbabilities, BitSequence};
pub use channel::{ChannelKind, ChannelState, ChannelSymbols};
pub use config::ExperimentConfig;
pub use channel_codec::{Ablation, ChannelCodec, ChannelCodecConfig, FrozenSource, Pipeline};
pub use data::{DatasetHandle, DatasetSource, ImageSet};
pub use error::{Error, Result};
pub use image::{Image, ImageShape};
pub use interface::InterfaceSpec;
pub use source::{SourceCodec, SourceCodecConfig};
