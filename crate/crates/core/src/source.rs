//! Application-layer codec: a probabilistic encoder from images to Bernoulli
//! bit parameters, a decoder from (possibly relaxed) bits back to images, and
//! the first training stage, which learns both through the BSC interface.

use candle_core::{Tensor, D};
use candle_nn::Optimizer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use crate::bits::{binarize, BitProbabilities, BitSequence};
pub use crate::image::{Image, ImageShape};

use crate::bits::round_half_up;
use crate::data::{DatasetHandle, ImageSet};
use crate::error::{Error, Result};
use crate::interface::{self, EpsilonParams, InterfaceSpec};
use crate::metrics;
use crate::nn::{self, scoped, Init, LayerNorm, Linear, ParamStore, TransformerBlock};

/// Name of the raw flip-probability parameter inside a stage-1 store.
pub const EPSILON_PARAM: &str = "interface.raw";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backbone {
    /// Fully connected layers with the given hidden widths.
    Mlp { hidden: Vec<usize> },
    /// Patch embedding followed by (alternately shifted) window-attention blocks.
    WindowTransformer {
        patch: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceCodecConfig {
    pub shape: ImageShape,
    pub bit_count: usize,
    pub backbone: Backbone,
}

impl SourceCodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bit_count == 0 {
            return Err(Error::Validation("bit_count must be positive".into()));
        }
        if self.shape.numel() == 0 {
            return Err(Error::Validation(format!("image shape {} is empty", self.shape)));
        }
        if let Backbone::WindowTransformer {
            patch,
            dim,
            depth,
            heads,
            window,
            ..
        } = &self.backbone
        {
            let (h, w) = (self.shape.height, self.shape.width);
            if *patch == 0 || h % patch != 0 || w % patch != 0 {
                return Err(Error::Validation(format!(
                    "patch {patch} does not tile a {h}x{w} image"
                )));
            }
            let (gh, gw) = (h / patch, w / patch);
            if *window == 0 || gh % window != 0 || gw % window != 0 {
                return Err(Error::Validation(format!(
                    "window {window} does not tile the {gh}x{gw} patch grid"
                )));
            }
            if *heads == 0 || dim % heads != 0 || *depth == 0 {
                return Err(Error::Validation(format!(
                    "width {dim} / heads {heads} / depth {depth} inconsistent"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Body {
    Mlp(Vec<Linear>),
    Window {
        embed: Linear,
        pos: Tensor,
        blocks: Vec<TransformerBlock>,
        norm: LayerNorm,
        window: usize,
        patch: usize,
        dim: usize,
    },
}

#[derive(Debug, Clone)]
struct Encoder {
    body: Body,
    head: Linear,
}

#[derive(Debug, Clone)]
struct Decoder {
    stem: Linear,
    body: Body,
    /// Absent only for the single-layer MLP decoder.
    head: Option<Linear>,
}

/// Source mapper and demapper sharing one backbone configuration.
#[derive(Debug, Clone)]
pub struct SourceCodec {
    config: SourceCodecConfig,
    encoder: Encoder,
    decoder: Decoder,
}

fn mlp_stack(store: &mut ParamStore, prefix: &str, input: usize, hidden: &[usize]) -> Result<Vec<Linear>> {
    let mut layers = Vec::with_capacity(hidden.len());
    let mut width = input;
    for (i, &h) in hidden.iter().enumerate() {
        layers.push(Linear::new(store, &scoped(prefix, &format!("fc{i}")), width, h)?);
        width = h;
    }
    Ok(layers)
}

fn run_mlp(layers: &[Linear], x: &Tensor) -> Result<Tensor> {
    let mut x = x.clone();
    for layer in layers {
        x = layer.forward(&x)?.gelu_erf()?;
    }
    Ok(x)
}

fn patchify(x: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h / patch, patch, w / patch, patch, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h / patch, w / patch, patch * patch * c))?)
}

fn unpatchify(x: &Tensor, patch: usize, channels: usize) -> Result<Tensor> {
    let (b, gh, gw, _) = x.dims4()?;
    Ok(x.reshape((b, gh, gw, patch, patch, channels))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, gh * patch, gw * patch, channels))?)
}

fn run_window_blocks(blocks: &[TransformerBlock], x: &Tensor, window: usize) -> Result<Tensor> {
    let (_, gh, gw, _) = x.dims4()?;
    let can_shift = window < gh || window < gw;
    let mut x = x.clone();
    for (i, block) in blocks.iter().enumerate() {
        x = block.forward_windowed(&x, window, can_shift && i % 2 == 1)?;
    }
    Ok(x)
}

impl SourceCodec {
    pub fn new(store: &mut ParamStore, config: &SourceCodecConfig) -> Result<Self> {
        config.validate()?;
        let numel = config.shape.numel();
        let m = config.bit_count;
        let (encoder, decoder) = match &config.backbone {
            Backbone::Mlp { hidden } => {
                let enc = mlp_stack(store, "enc", numel, hidden)?;
                let enc_out = hidden.last().copied().unwrap_or(numel);
                let head = Linear::new(store, "enc.head", enc_out, m)?;
                let rev: Vec<usize> = hidden.iter().rev().copied().collect();
                let stem_out = rev.first().copied().unwrap_or(numel);
                let (stem, dec, dec_head) = if rev.is_empty() {
                    (Linear::new(store, "dec.stem", m, numel)?, Vec::new(), None)
                } else {
                    let stem = Linear::new(store, "dec.stem", m, stem_out)?;
                    let dec = mlp_stack(store, "dec", stem_out, &rev[1..])?;
                    let last = *rev.last().expect("nonempty");
                    (stem, dec, Some(Linear::new(store, "dec.head", last, numel)?))
                };
                (
                    Encoder {
                        body: Body::Mlp(enc),
                        head,
                    },
                    Decoder {
                        stem,
                        body: Body::Mlp(dec),
                        head: dec_head,
                    },
                )
            }
            Backbone::WindowTransformer {
                patch,
                dim,
                depth,
                heads,
                window,
                mlp_ratio,
            } => {
                let (gh, gw) = (config.shape.height / patch, config.shape.width / patch);
                let patch_dim = patch * patch * config.shape.channels;
                let tokens = gh * gw;
                let body = |store: &mut ParamStore, prefix: &str| -> Result<Body> {
                    let embed = Linear::new(store, &scoped(prefix, "embed"), patch_dim, *dim)?;
                    let pos = store.get(&scoped(prefix, "pos"), &[1, gh, gw, *dim], Init::Normal(0.02))?;
                    let blocks = (0..*depth)
                        .map(|i| {
                            TransformerBlock::new(store, &scoped(prefix, &format!("block{i}")), *dim, *heads, *mlp_ratio)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let norm = LayerNorm::new(store, &scoped(prefix, "norm"), *dim)?;
                    Ok(Body::Window {
                        embed,
                        pos,
                        blocks,
                        norm,
                        window: *window,
                        patch: *patch,
                        dim: *dim,
                    })
                };
                let enc_body = body(store, "enc")?;
                let enc_head = Linear::new(store, "enc.head", tokens * dim, m)?;
                let dec_body = body(store, "dec")?;
                let stem = Linear::new(store, "dec.stem", m, tokens * dim)?;
                let dec_head = Some(Linear::new(store, "dec.head", *dim, patch_dim)?);
                (
                    Encoder {
                        body: enc_body,
                        head: enc_head,
                    },
                    Decoder {
                        stem,
                        body: dec_body,
                        head: dec_head,
                    },
                )
            }
        };
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &SourceCodecConfig {
        &self.config
    }

    pub fn bit_count(&self) -> usize {
        self.config.bit_count
    }

    fn check_images(&self, x: &Tensor) -> Result<usize> {
        let s = self.config.shape;
        match x.dims() {
            [b, h, w, c] if (*h, *w, *c) == (s.height, s.width, s.channels) => Ok(*b),
            other => Err(Error::shape(format!("(batch, {s})"), format!("{other:?}"))),
        }
    }

    /// `(batch, H, W, C)` in `[0, 1]` → `(batch, M)` Bernoulli parameters.
    pub fn encode_probs(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.check_images(x)?;
        let centered = x.affine(2.0, -1.0)?;
        let features = match &self.encoder.body {
            Body::Mlp(layers) => run_mlp(layers, &centered.reshape((b, ()))?)?,
            Body::Window {
                embed,
                pos,
                blocks,
                norm,
                window,
                patch,
                ..
            } => {
                let tokens = embed.forward(&patchify(&centered, *patch)?)?.broadcast_add(pos)?;
                let tokens = run_window_blocks(blocks, &tokens, *window)?;
                norm.forward(&tokens)?.reshape((b, ()))?
            }
        };
        Ok(candle_nn::ops::sigmoid(&self.encoder.head.forward(&features)?)?)
    }

    /// `(batch, M)` hard or relaxed bits → `(batch, H, W, C)` in `[0, 1]`.
    pub fn decode_tensor(&self, bits: &Tensor) -> Result<Tensor> {
        let (b, m) = bits.dims2()?;
        if m != self.config.bit_count {
            return Err(Error::shape(self.config.bit_count, m));
        }
        let s = self.config.shape;
        let signed = bits.affine(2.0, -1.0)?;
        let stem = self.decoder.stem.forward(&signed)?;
        let pixels = match &self.decoder.body {
            Body::Mlp(layers) => match &self.decoder.head {
                Some(head) => head.forward(&run_mlp(layers, &stem.gelu_erf()?)?)?,
                None => stem,
            },
            Body::Window {
                pos,
                blocks,
                norm,
                window,
                patch,
                dim,
                ..
            } => {
                let (gh, gw) = (s.height / patch, s.width / patch);
                let tokens = stem.reshape((b, gh, gw, *dim))?.broadcast_add(pos)?;
                let tokens = norm.forward(&run_window_blocks(blocks, &tokens, *window)?)?;
                let head = self.decoder.head.as_ref().expect("window decoder has a head");
                let patches = head.forward(&tokens)?;
                unpatchify(&patches, *patch, s.channels)?
            }
        };
        Ok(candle_nn::ops::sigmoid(&pixels)?.reshape((b, s.height, s.width, s.channels))?)
    }

    pub fn encode_soft(&self, s: &Image) -> Result<BitProbabilities> {
        if s.shape() != self.config.shape {
            return Err(Error::shape(self.config.shape, s.shape()));
        }
        let p = self.encode_probs(&s.to_tensor()?)?.squeeze(0)?.to_vec1::<f64>()?;
        BitProbabilities::new(p)
    }

    /// Hard bits for transmission: rounding of the encoder's probabilities.
    pub fn encode_bits(&self, s: &Image) -> Result<BitSequence> {
        Ok(binarize(&self.encode_soft(s)?))
    }

    /// Accepts hard bits (0/1) or relaxed reals of length M.
    pub fn decode(&self, bits: &[f64]) -> Result<Image> {
        if bits.len() != self.config.bit_count {
            return Err(Error::shape(self.config.bit_count, bits.len()));
        }
        let t = Tensor::from_vec(bits.to_vec(), (1, bits.len()), &nn::device())?;
        let out = self.decode_tensor(&t)?;
        let values = out.flatten_all()?.to_vec1::<f64>()?;
        Image::new(values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(), self.config.shape)
    }

    /// Hard rounded bits for a batch, `(batch, M)` of 0.0 / 1.0.
    pub fn encode_hard(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.encode_probs(x)?;
        let rounded = round_half_up(&p.flatten_all()?.to_vec1::<f64>()?);
        Ok(Tensor::from_vec(rounded, p.dims(), &nn::device())?)
    }
}

/// Reconstruction MSE plus the λ-weighted interface penalty.
pub fn stage1_loss(s: &Tensor, s_hat: &Tensor, eps: &Tensor, lambda: f64) -> Result<Tensor> {
    let mse = nn::mse(s, s_hat)?;
    Ok((mse + interface::ops::regularization(eps, lambda)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub codec: SourceCodecConfig,
    pub lambda: f64,
    pub init_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Stage1Config {
    /// Identifies a stage-1 run: the configuration plus the dataset it sees.
    pub fn fingerprint(&self, dataset: &DatasetHandle) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.update(dataset.name().as_bytes());
        h.update(dataset.shape().to_string().as_bytes());
        h.update((dataset.train().len() as u64).to_le_bytes());
        h.update((dataset.test().len() as u64).to_le_bytes());
        h.update(dataset.seed().to_le_bytes());
        hex::encode(&h.finalize()[..16])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub epoch: usize,
    pub loss: f64,
    pub mean_eps: f64,
    pub psnr_val: f64,
}

pub struct Stage1Outcome {
    pub store: ParamStore,
    pub codec: SourceCodec,
    pub spec: InterfaceSpec,
    pub log: Vec<Stage1Record>,
}

/// Current flip probabilities held by a stage-1 store.
pub fn store_epsilon(store: &ParamStore) -> Result<Vec<f64>> {
    let var = store
        .var(EPSILON_PARAM)
        .ok_or_else(|| Error::Incompatible(format!("store has no `{EPSILON_PARAM}`")))?;
    Ok(interface::epsilon_from_raw(&var.as_tensor().to_vec1::<f64>()?))
}

/// Mean PSNR of `decode(binarize(encode(s)))` over a set, batched.
pub fn clean_psnr(codec: &SourceCodec, set: &ImageSet, batch: usize) -> Result<f64> {
    let mut all = Vec::with_capacity(set.len());
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let x = set.batch(chunk)?;
        let recon = codec.decode_tensor(&codec.encode_hard(&x)?)?;
        all.extend(metrics::batch_psnr(&x, &recon)?);
    }
    Ok(metrics::mean(&all))
}

/// Mean PSNR when the given bit positions of every clean code are flipped.
pub fn flipped_psnr(codec: &SourceCodec, set: &ImageSet, positions: &[usize], count: usize) -> Result<f64> {
    let indices: Vec<usize> = (0..count.min(set.len())).collect();
    let x = set.batch(&indices)?;
    let bits = codec.encode_hard(&x)?;
    let m = codec.bit_count();
    let mut mask = vec![0.0; m];
    for &p in positions {
        if p >= m {
            return Err(Error::shape(format!("position < {m}"), p));
        }
        mask[p] = 1.0;
    }
    let mask = Tensor::from_vec(mask, (1, m), &nn::device())?;
    // b xor mask = b + mask - 2 b mask
    let flipped = bits
        .broadcast_add(&mask)?
        .sub(&bits.broadcast_mul(&mask)?.affine(2.0, 0.0)?)?;
    let recon = codec.decode_tensor(&flipped)?;
    Ok(metrics::mean(&metrics::batch_psnr(&x, &recon)?))
}

/// One pass of the stochastic stage-1 objective on a batch, returning the loss tensor.
pub fn stage1_step_loss<R: rand::Rng + ?Sized>(
    codec: &SourceCodec,
    raw_eps: &Tensor,
    x: &Tensor,
    lambda: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let p = codec.encode_probs(x)?;
    let eps = interface::ops::epsilon(raw_eps)?;
    let q = interface::ops::noisy_marginal(&p, &eps)?;
    let noisy = interface::ops::sample_straight_through(&q, rng)?;
    let recon = codec.decode_tensor(&noisy)?;
    stage1_loss(x, &recon, &eps, lambda)
}

/// Trains encoder, decoder and flip probabilities jointly through the BSC array.
pub fn train_stage1(dataset: &DatasetHandle, config: &Stage1Config) -> Result<Stage1Outcome> {
    train_stage1_with(dataset, config, |_| {})
}

/// As [`train_stage1`], calling `on_epoch` after each logged epoch.
pub fn train_stage1_with(
    dataset: &DatasetHandle,
    config: &Stage1Config,
    mut on_epoch: impl FnMut(&Stage1Record),
) -> Result<Stage1Outcome> {
    if dataset.shape() != config.codec.shape {
        return Err(Error::shape(config.codec.shape, dataset.shape()));
    }
    if dataset.train().is_empty() {
        return Err(Error::Validation("empty training split".into()));
    }
    let mut store = ParamStore::new(config.seed);
    let codec = SourceCodec::new(&mut store, &config.codec)?;
    let init = EpsilonParams::constant(config.codec.bit_count, config.init_epsilon)?;
    let raw = store.get(EPSILON_PARAM, &[config.codec.bit_count], Init::Const(init.raw[0]))?;
    let mut optimizer = candle_nn::AdamW::new(
        store.vars(),
        candle_nn::ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let mut seen = 0usize;
        for (step, batch) in dataset.batches(epoch, config.batch_size).iter().enumerate() {
            let x = dataset.train().batch(batch)?;
            let loss = stage1_step_loss(&codec, &raw, &x, config.lambda, &mut rng)?;
            let value = loss.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, step, loss: value });
            }
            optimizer.backward_step(&loss)?;
            total += value * batch.len() as f64;
            seen += batch.len();
        }
        let eps = store_epsilon(&store)?;
        let record = Stage1Record {
            epoch,
            loss: total / seen as f64,
            mean_eps: metrics::mean(&eps),
            psnr_val: clean_psnr(&codec, dataset.test(), 256)?,
        };
        on_epoch(&record);
        log.push(record);
    }
    let eps = store_epsilon(&store)?;
    let spec = InterfaceSpec::new(eps, config.fingerprint(dataset))?;
    Ok(Stage1Outcome {
        store,
        codec,
        spec,
        log,
    })
}

/// Positions sorted by ascending flip probability (most important first).
pub fn importance_order(eps: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..eps.len()).collect();
    order.sort_by(|&a, &b| eps[a].total_cmp(&eps[b]).then(a.cmp(&b)));
    order
}

/// Mean over the last dimension, useful for logging encoder saturation.
pub fn mean_probability(p: &Tensor) -> Result<f64> {
    Ok(p.mean(D::Minus1)?.mean_all()?.to_scalar::<f64>()?)
}
