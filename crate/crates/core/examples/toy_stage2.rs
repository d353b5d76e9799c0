//! Trains the toy stage-2 channel codec against a frozen toy stage-1 model
//! and prints validation PSNR at the probe SNRs.
//!
//! Usage: cargo run --example toy_stage2 -p ijscc-core [epochs] [lr] [awgn|rayleigh] [full|no-ian|no-iattn] [seed]
//!
//! The stage-1 model is cached under the system temp directory.

use std::collections::HashMap;
use std::time::Instant;

use ijscc::channel_codec::{self, Ablation, ChannelCodecConfig, FrozenSource, SnrPolicy, Stage2Config};
use ijscc::data::make_synthetic;
use ijscc::image::ImageShape;
use ijscc::interface::InterfaceSpec;
use ijscc::nn::ParamStore;
use ijscc::source::{self, Backbone, SourceCodecConfig, Stage1Config};
use ijscc::ChannelKind;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(20);
    let lr = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(1e-3);
    let channel: ChannelKind = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(ChannelKind::Awgn);
    let arm: Ablation = args.get(4).map(|s| s.parse()).transpose()?.unwrap_or(Ablation::Full);
    let seed = args.get(5).map(|s| s.parse()).transpose()?.unwrap_or(11);

    let shape = ImageShape::new(8, 8, 3);
    let data = make_synthetic(512, shape, 7)?;
    let s1 = Stage1Config {
        codec: SourceCodecConfig {
            shape,
            bit_count: 96,
            backbone: Backbone::WindowTransformer {
                patch: 2,
                dim: 32,
                depth: 2,
                heads: 2,
                window: 2,
                mlp_ratio: 2,
            },
        },
        lambda: 0.1,
        init_epsilon: 0.25,
        epochs: 60,
        batch_size: 32,
        learning_rate: 3e-3,
        seed: 7,
    };
    let cache = std::env::temp_dir().join(format!("ijscc-toy-{}", s1.fingerprint(&data)));
    std::fs::create_dir_all(&cache)?;
    let (ckpt, spec_path) = (cache.join("source.safetensors"), cache.join("interface.bsc"));
    if !ckpt.exists() {
        let out = source::train_stage1(&data, &s1)?;
        out.store.save(&ckpt, HashMap::new())?;
        out.spec.save(&spec_path)?;
    }
    let (store, _) = ParamStore::load(&ckpt, 0)?;
    let spec = InterfaceSpec::load(&spec_path)?;
    let frozen = FrozenSource::new(store, &s1.codec)?;
    println!(
        "stage-1 clean psnr {:.3}",
        source::clean_psnr(frozen.codec(), data.test(), 256)?
    );

    let cfg = Stage2Config {
        codec: ChannelCodecConfig {
            bit_count: 96,
            symbol_count: 24,
            tokens: 12,
            dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            se_reduction: 4,
            cond_hidden: 16,
            ablation: arm,
        },
        channel,
        snr: SnrPolicy::Uniform { low: 5.0, high: 20.0 },
        epochs,
        batch_size: 32,
        learning_rate: lr,
        seed,
        probe_snrs: vec![5.0, 10.0, 15.0, 20.0],
    };
    let start = Instant::now();
    channel_codec::train_stage2_with(&data, &frozen, &spec, &cfg, |r| {
        let probes: Vec<String> = r.psnr_val.iter().map(|p| format!("{:.3}", p.psnr)).collect();
        println!("epoch {:3} loss {:.5} probes {}", r.epoch, r.loss, probes.join(" "));
    })?;
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
