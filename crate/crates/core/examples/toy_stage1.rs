//! Trains the toy stage-1 model on synthetic data and reports the
//! interface it learned.
//!
//! Usage: cargo run --example toy_stage1 -p ijscc-core [epochs] [lr] [lambda] [mlp|window]

use std::time::Instant;

use ijscc::data::make_synthetic;
use ijscc::image::ImageShape;
use ijscc::nn::ParamStore;
use ijscc::source::{self, Backbone, SourceCodec, SourceCodecConfig, Stage1Config};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(30);
    let lr = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(2e-3);
    let lambda = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(1.0);
    let backbone = match args.get(4).map(String::as_str) {
        Some("window") => Backbone::WindowTransformer {
            patch: 2,
            dim: 32,
            depth: 2,
            heads: 2,
            window: 2,
            mlp_ratio: 2,
        },
        _ => Backbone::Mlp { hidden: vec![256] },
    };
    let shape = ImageShape::new(8, 8, 3);
    let data = make_synthetic(512, shape, 7)?;
    let config = Stage1Config {
        codec: SourceCodecConfig {
            shape,
            bit_count: 96,
            backbone,
        },
        lambda,
        init_epsilon: 0.25,
        epochs,
        batch_size: 32,
        learning_rate: lr,
        seed: 7,
    };
    let mut store = ParamStore::new(config.seed);
    let untrained = SourceCodec::new(&mut store, &config.codec)?;
    println!("untrained clean psnr {:.3}", source::clean_psnr(&untrained, data.test(), 256)?);
    let start = Instant::now();
    let out = source::train_stage1_with(&data, &config, |r| {
        println!(
            "epoch {:3} loss {:.5} mean_eps {:.4} psnr_val {:.3}",
            r.epoch, r.loss, r.mean_eps, r.psnr_val
        )
    })?;
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());
    let eps = out.spec.epsilon();
    let order = source::importance_order(eps);
    let decile = eps.len() / 10;
    let low = &order[..decile];
    let high = &order[order.len() - decile..];
    let set = data.test();
    println!(
        "eps min {:.4} max {:.4}",
        eps.iter().cloned().fold(f64::INFINITY, f64::min),
        eps.iter().cloned().fold(0.0, f64::max)
    );
    println!(
        "flip lowest-eps decile {:.3} dB, highest-eps decile {:.3} dB, clean {:.3} dB",
        source::flipped_psnr(&out.codec, set, low, 100)?,
        source::flipped_psnr(&out.codec, set, high, 100)?,
        source::clean_psnr(&out.codec, set, 256)?
    );
    Ok(())
}
