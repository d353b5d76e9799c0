#![allow(dead_code)]

use ijscc::channel_codec::{Ablation, ChannelCodecConfig, SnrPolicy, Stage2Config};
use ijscc::data::{make_synthetic, DatasetHandle};
use ijscc::image::ImageShape;
use ijscc::source::{Backbone, SourceCodecConfig, Stage1Config};
use ijscc::ChannelKind;

pub const TOY_BITS: usize = 96;
pub const TOY_SYMBOLS: usize = 24;

pub fn toy_shape() -> ImageShape {
    ImageShape::new(8, 8, 3)
}

pub fn toy_dataset() -> DatasetHandle {
    make_synthetic(512, toy_shape(), 7).expect("synthetic dataset")
}

pub fn toy_stage1(epochs: usize, lambda: f64) -> Stage1Config {
    Stage1Config {
        codec: SourceCodecConfig {
            shape: toy_shape(),
            bit_count: TOY_BITS,
            backbone: Backbone::WindowTransformer {
                patch: 2,
                dim: 32,
                depth: 2,
                heads: 2,
                window: 2,
                mlp_ratio: 2,
            },
        },
        lambda,
        init_epsilon: 0.25,
        epochs,
        batch_size: 32,
        learning_rate: 3e-3,
        seed: 7,
    }
}

pub fn toy_channel_codec(ablation: Ablation) -> ChannelCodecConfig {
    ChannelCodecConfig {
        bit_count: TOY_BITS,
        symbol_count: TOY_SYMBOLS,
        tokens: 12,
        dim: 32,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        se_reduction: 4,
        cond_hidden: 16,
        ablation,
    }
}

pub fn toy_stage2(channel: ChannelKind, ablation: Ablation, seed: u64) -> Stage2Config {
    Stage2Config {
        codec: toy_channel_codec(ablation),
        channel,
        snr: SnrPolicy::Uniform {
            low: 5.0,
            high: 20.0,
        },
        epochs: 20,
        batch_size: 32,
        learning_rate: 1e-3,
        seed,
        probe_snrs: vec![5.0, 10.0, 15.0, 20.0],
    }
}
