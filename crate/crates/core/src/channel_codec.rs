//! Wireless-access-node codec: channel mapper and demapper built from
//! transformer blocks with SNR-conditioned modulation, guided by an
//! importance-aware net that reads the frozen interface. Also the second
//! training stage, run against a frozen source codec.

use candle_core::{Tensor, D};
use candle_nn::Optimizer;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bits::{round_half_up, BitProbabilities, BitSequence};
use crate::channel::{self, ChannelKind, ChannelState, ChannelSymbols};
use crate::data::{DatasetHandle, ImageSet};
use crate::error::{Error, Result};
use crate::interface::{self, InterfaceSpec};
use crate::metrics;
use crate::nn::{
    self, scoped, Init, LayerNorm, Linear, Modulation, ParamStore, SqueezeExcitation,
    TransformerBlock,
};
use crate::source::{SourceCodec, SourceCodecConfig};

/// Which parts of the importance-aware net are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Interface attention followed by squeeze-excitation.
    Full,
    /// Neither interface attention nor squeeze-excitation.
    NoIan,
    /// Squeeze-excitation only.
    NoIattn,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoIan, Ablation::NoIattn];

    pub fn has_attention(self) -> bool {
        self == Ablation::Full
    }

    pub fn has_se(self) -> bool {
        self != Ablation::NoIan
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoIan => "no-ian",
            Ablation::NoIattn => "no-iattn",
        })
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-ian" => Ok(Ablation::NoIan),
            "no-iattn" => Ok(Ablation::NoIattn),
            other => Err(Error::InvalidArgument {
                name: "ablation",
                reason: format!("unknown arm `{other}` (expected full, no-ian or no-iattn)"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelCodecConfig {
    pub bit_count: usize,
    /// Complex channel uses per image.
    pub symbol_count: usize,
    /// Bit positions and channel reals are split evenly over this many tokens.
    pub tokens: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub se_reduction: usize,
    pub cond_hidden: usize,
    pub ablation: Ablation,
}

impl ChannelCodecConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.tokens;
        if t == 0 || self.bit_count % t != 0 || (2 * self.symbol_count) % t != 0 {
            return Err(Error::Validation(format!(
                "{t} tokens must divide both {} bits and {} channel reals",
                self.bit_count,
                2 * self.symbol_count
            )));
        }
        if self.symbol_count == 0 || self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Validation(format!(
                "symbol_count {} / dim {} / heads {} inconsistent",
                self.symbol_count, self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn bits_per_token(&self) -> usize {
        self.bit_count / self.tokens
    }

    pub fn reals_per_token(&self) -> usize {
        2 * self.symbol_count / self.tokens
    }
}

/// Latent token features together with the interface importance vector.
#[derive(Debug, Clone)]
pub struct IANInput {
    /// `(batch, tokens, dim)`.
    pub features: Tensor,
    /// `(M,)`, values `1 - 2ε`.
    pub importance: Tensor,
}

impl IANInput {
    pub fn new(features: Tensor, importance: Tensor) -> Result<Self> {
        if features.rank() != 3 || importance.rank() != 1 {
            return Err(Error::shape(
                "features (batch, tokens, dim) and importance (M,)",
                format!("{:?} and {:?}", features.dims(), importance.dims()),
            ));
        }
        let tokens = features.dim(1)?;
        let m = importance.dim(0)?;
        if m % tokens != 0 {
            return Err(Error::shape(format!("M divisible by {tokens} tokens"), m));
        }
        Ok(Self {
            features,
            importance,
        })
    }
}

/// Multiplicative attention scores derived solely from the importance vector:
/// each token's slice of `1 - 2ε` is projected to the feature width and
/// squashed to gates in `(0, 2)`.
#[derive(Debug, Clone)]
pub struct InterfaceAttention {
    proj: Linear,
    group: usize,
}

impl InterfaceAttention {
    pub fn new(store: &mut ParamStore, name: &str, group: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, name, group, dim)?,
            group,
        })
    }

    /// `(tokens, dim)` gates.
    pub fn scores(&self, importance: &Tensor) -> Result<Tensor> {
        let m = importance.dim(0)?;
        if m % self.group != 0 {
            return Err(Error::shape(format!("a multiple of {}", self.group), m));
        }
        let grouped = importance.reshape((m / self.group, self.group))?;
        Ok((candle_nn::ops::sigmoid(&self.proj.forward(&grouped)?)? * 2.0)?)
    }

    pub fn forward(&self, features: &Tensor, importance: &Tensor) -> Result<Tensor> {
        let scores = self.scores(importance)?;
        if scores.dims() != &features.dims()[1..] {
            return Err(Error::shape(
                format!("{:?}", &features.dims()[1..]),
                format!("{:?}", scores.dims()),
            ));
        }
        Ok(features.broadcast_mul(&scores.unsqueeze(0)?)?)
    }
}

/// Interface attention followed by squeeze-excitation; either stage may be
/// absent for ablations.
#[derive(Debug, Clone)]
pub struct ImportanceAwareNet {
    attention: Option<InterfaceAttention>,
    se: Option<SqueezeExcitation>,
}

impl ImportanceAwareNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: usize,
        dim: usize,
        se_reduction: usize,
        ablation: Ablation,
    ) -> Result<Self> {
        let attention = if ablation.has_attention() {
            Some(InterfaceAttention::new(store, &scoped(name, "iattn"), group, dim)?)
        } else {
            None
        };
        let se = if ablation.has_se() {
            Some(SqueezeExcitation::new(store, &scoped(name, "se"), dim, se_reduction)?)
        } else {
            None
        };
        Ok(Self { attention, se })
    }

    pub fn attention(&self) -> Option<&InterfaceAttention> {
        self.attention.as_ref()
    }

    pub fn se(&self) -> Option<&SqueezeExcitation> {
        self.se.as_ref()
    }

    pub fn forward(&self, input: &IANInput) -> Result<Tensor> {
        let mut x = input.features.clone();
        if let Some(att) = &self.attention {
            x = att.forward(&x, &input.importance)?;
        }
        if let Some(se) = &self.se {
            x = se.forward(&x)?;
        }
        Ok(x)
    }
}

pub fn ian_forward(input: &IANInput, net: &ImportanceAwareNet) -> Result<Tensor> {
    net.forward(input)
}

#[derive(Debug, Clone)]
struct Stack {
    blocks: Vec<TransformerBlock>,
    mods: Vec<Modulation>,
    norm: LayerNorm,
}

impl Stack {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &ChannelCodecConfig, cond_dim: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.depth);
        let mut mods = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            blocks.push(TransformerBlock::new(
                store,
                &scoped(prefix, &format!("block{i}")),
                cfg.dim,
                cfg.heads,
                cfg.mlp_ratio,
            )?);
            mods.push(Modulation::new(
                store,
                &scoped(prefix, &format!("mod{i}")),
                cond_dim,
                cfg.cond_hidden,
                cfg.dim,
            )?);
        }
        Ok(Self {
            blocks,
            mods,
            norm: LayerNorm::new(store, &scoped(prefix, "norm"), cfg.dim)?,
        })
    }

    fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (block, modulation) in self.blocks.iter().zip(&self.mods) {
            x = modulation.forward(&block.forward(&x)?, cond)?;
        }
        self.norm.forward(&x)
    }
}

#[derive(Debug, Clone)]
struct Mapper {
    embed: Linear,
    pos: Tensor,
    ian: ImportanceAwareNet,
    stack: Stack,
    head: Linear,
}

#[derive(Debug, Clone)]
struct Demapper {
    embed: Linear,
    pos: Tensor,
    stack: Stack,
    ian: ImportanceAwareNet,
    head: Linear,
}

/// Scale applied to SNR in dB before it enters the conditioning networks.
const SNR_SCALE: f64 = 1.0 / 20.0;

#[derive(Debug, Clone)]
pub struct ChannelCodec {
    config: ChannelCodecConfig,
    mapper: Mapper,
    demapper: Demapper,
}

impl ChannelCodec {
    pub fn new(store: &mut ParamStore, config: &ChannelCodecConfig) -> Result<Self> {
        config.validate()?;
        let (t, d) = (config.tokens, config.dim);
        let (g, r) = (config.bits_per_token(), config.reals_per_token());
        let mapper = Mapper {
            embed: Linear::new(store, "map.embed", g, d)?,
            pos: store.get("map.pos", &[1, t, d], Init::Normal(0.02))?,
            ian: ImportanceAwareNet::new(store, "map.ian", g, d, config.se_reduction, config.ablation)?,
            stack: Stack::new(store, "map", config, 1)?,
            head: Linear::new(store, "map.head", d, r)?,
        };
        let demapper = Demapper {
            embed: Linear::new(store, "demap.embed", r, d)?,
            pos: store.get("demap.pos", &[1, t, d], Init::Normal(0.02))?,
            stack: Stack::new(store, "demap", config, 2)?,
            ian: ImportanceAwareNet::new(store, "demap.ian", g, d, config.se_reduction, config.ablation)?,
            head: Linear::new(store, "demap.head", d, g)?,
        };
        Ok(Self {
            config: config.clone(),
            mapper,
            demapper,
        })
    }

    pub fn config(&self) -> &ChannelCodecConfig {
        &self.config
    }

    pub fn mapper_ian(&self) -> &ImportanceAwareNet {
        &self.mapper.ian
    }

    fn check_importance(&self, importance: &Tensor) -> Result<()> {
        match importance.dims() {
            [m] if *m == self.config.bit_count => Ok(()),
            other => Err(Error::shape(format!("[{}]", self.config.bit_count), format!("{other:?}"))),
        }
    }

    /// `(batch, M)` bits → `(batch, 2L)` interleaved reals with unit mean
    /// complex-symbol power per row.
    pub fn map_batch(&self, bits: &Tensor, importance: &Tensor, snr_db: &[f64]) -> Result<Tensor> {
        let (b, m) = bits.dims2()?;
        if m != self.config.bit_count {
            return Err(Error::shape(self.config.bit_count, m));
        }
        self.check_importance(importance)?;
        if snr_db.len() != b {
            return Err(Error::shape(b, snr_db.len()));
        }
        let cfg = &self.config;
        let tokens = bits
            .affine(2.0, -1.0)?
            .reshape((b, cfg.tokens, cfg.bits_per_token()))?;
        let x = self.mapper.embed.forward(&tokens)?.broadcast_add(&self.mapper.pos)?;
        let x = self.mapper.ian.forward(&IANInput::new(x, importance.clone())?)?;
        let cond = Tensor::from_vec(
            snr_db.iter().map(|s| s * SNR_SCALE).collect::<Vec<_>>(),
            (b, 1),
            &nn::device(),
        )?;
        let x = self.mapper.stack.forward(&x, &cond)?;
        let reals = self.mapper.head.forward(&x)?.reshape((b, 2 * cfg.symbol_count))?;
        normalize_rows(&reals, cfg.symbol_count)
    }

    /// Equalized received reals `(batch, 2L)` → `(batch, M)` bit probabilities.
    pub fn demap_batch(
        &self,
        equalized: &Tensor,
        importance: &Tensor,
        snr_db: &[f64],
        fading_gain: &[f64],
    ) -> Result<Tensor> {
        let (b, n) = equalized.dims2()?;
        let cfg = &self.config;
        if n != 2 * cfg.symbol_count {
            return Err(Error::shape(2 * cfg.symbol_count, n));
        }
        self.check_importance(importance)?;
        if snr_db.len() != b || fading_gain.len() != b {
            return Err(Error::shape(b, snr_db.len().min(fading_gain.len())));
        }
        let tokens = equalized.reshape((b, cfg.tokens, cfg.reals_per_token()))?;
        let x = self.demapper.embed.forward(&tokens)?.broadcast_add(&self.demapper.pos)?;
        let cond: Vec<f64> = snr_db
            .iter()
            .zip(fading_gain)
            .flat_map(|(s, g)| [s * SNR_SCALE, *g])
            .collect();
        let cond = Tensor::from_vec(cond, (b, 2), &nn::device())?;
        let x = self.demapper.stack.forward(&x, &cond)?;
        let x = self.demapper.ian.forward(&IANInput::new(x, importance.clone())?)?;
        let logits = self.demapper.head.forward(&x)?.reshape((b, cfg.bit_count))?;
        Ok(candle_nn::ops::sigmoid(&logits)?)
    }
}

/// Scales each row of interleaved reals so the mean complex power is 1.
pub fn normalize_rows(reals: &Tensor, symbols: usize) -> Result<Tensor> {
    let energy = reals.sqr()?.sum_keepdim(D::Minus1)?;
    let scale = (energy.recip()? * symbols as f64)?.sqrt()?;
    Ok(reals.broadcast_mul(&scale)?)
}

pub fn importance_tensor(spec: &InterfaceSpec) -> Result<Tensor> {
    Ok(Tensor::from_vec(
        spec.importance_weights(),
        spec.bit_count(),
        &nn::device(),
    )?)
}

/// Maps one bit sequence to `L` unit-power complex symbols.
pub fn map_bits(
    b: &BitSequence,
    spec: &InterfaceSpec,
    snr_db: f64,
    codec: &ChannelCodec,
) -> Result<ChannelSymbols> {
    if b.len() != codec.config.bit_count || spec.bit_count() != codec.config.bit_count {
        return Err(Error::shape(codec.config.bit_count, b.len()));
    }
    let bits = Tensor::from_vec(b.to_reals(), (1, b.len()), &nn::device())?;
    let reals = codec
        .map_batch(&bits, &importance_tensor(spec)?, &[snr_db])?
        .squeeze(0)?
        .to_vec1::<f64>()?;
    channel::power_normalize(&channel::complex_from_reals(&reals)?)
}

/// Equalizes with the known channel state and returns bit probabilities.
pub fn demap_symbols(
    y: &[Complex64],
    state: &ChannelState,
    spec: &InterfaceSpec,
    snr_db: f64,
    codec: &ChannelCodec,
) -> Result<BitProbabilities> {
    if y.len() != codec.config.symbol_count {
        return Err(Error::shape(codec.config.symbol_count, y.len()));
    }
    if spec.bit_count() != codec.config.bit_count {
        return Err(Error::shape(codec.config.bit_count, spec.bit_count()));
    }
    let z = channel::reals_from_complex(&channel::equalize(y, state));
    let z = Tensor::from_vec(z, (1, 2 * y.len()), &nn::device())?;
    let p = codec
        .demap_batch(&z, &importance_tensor(spec)?, &[snr_db], &[state.h.norm()])?
        .squeeze(0)?
        .to_vec1::<f64>()?;
    BitProbabilities::new(p)
}

/// Reconstruction MSE through the frozen source decoder.
pub fn stage2_loss(s: &Tensor, s_hat: &Tensor) -> Result<Tensor> {
    nn::mse(s, s_hat)
}

/// A source codec built from a frozen store: it cannot receive gradients.
pub struct FrozenSource {
    codec: SourceCodec,
    checksum: String,
}

impl FrozenSource {
    pub fn new(store: ParamStore, config: &SourceCodecConfig) -> Result<Self> {
        let mut store = store.freeze();
        let checksum = store.checksum()?;
        let codec = SourceCodec::new(&mut store, config)?;
        Ok(Self { codec, checksum })
    }

    pub fn codec(&self) -> &SourceCodec {
        &self.codec
    }

    /// Checksum of the stage-1 parameters at freezing time.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SnrPolicy {
    Fixed { db: f64 },
    Uniform { low: f64, high: f64 },
}

impl SnrPolicy {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            SnrPolicy::Fixed { db } => db,
            SnrPolicy::Uniform { low, high } if high > low => rng.random_range(low..=high),
            SnrPolicy::Uniform { low, .. } => low,
        }
    }
}

/// Draws channel realizations for a batch and returns the equalized
/// received reals `x + n / h` along with each row's `|h|`.
pub fn pass_channel<R: Rng + ?Sized>(
    x: &Tensor,
    kind: ChannelKind,
    snr_db: &[f64],
    rng: &mut R,
) -> Result<(Tensor, Vec<f64>)> {
    let (b, n) = x.dims2()?;
    let mut noise = Vec::with_capacity(b * n);
    let mut gains = Vec::with_capacity(b);
    for &snr in snr_db.iter().take(b) {
        let sigma2 = channel::snr_to_sigma2(snr);
        let h = match kind {
            ChannelKind::Awgn => Complex64::new(1.0, 0.0),
            ChannelKind::Rayleigh => channel::complex_gaussian(rng, 1.0),
        };
        for _ in 0..n / 2 {
            let e = channel::complex_gaussian(rng, sigma2) / h;
            noise.push(e.re);
            noise.push(e.im);
        }
        gains.push(h.norm());
    }
    let noise = Tensor::from_vec(noise, (b, n), &nn::device())?;
    Ok(((x + noise)?, gains))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub codec: ChannelCodecConfig,
    pub channel: ChannelKind,
    pub snr: SnrPolicy,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub probe_snrs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePsnr {
    pub snr_db: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Record {
    pub epoch: usize,
    pub loss: f64,
    pub psnr_val: Vec<ProbePsnr>,
}

/// Probe evaluations share one channel stream so SNR points see common noise draws.
const PROBE_STREAM: u64 = 0xE7A1;

pub struct Stage2Outcome {
    pub store: ParamStore,
    pub codec: ChannelCodec,
    pub log: Vec<Stage2Record>,
}

/// Per-image evaluation result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub psnr: f64,
    pub ber: f64,
}

/// The full transmission chain with hard decisions at both bit boundaries.
pub struct Pipeline<'a> {
    pub source: &'a SourceCodec,
    pub channel: &'a ChannelCodec,
    pub spec: &'a InterfaceSpec,
}

impl Pipeline<'_> {
    fn check(&self) -> Result<()> {
        let m = self.spec.bit_count();
        if self.source.bit_count() != m || self.channel.config.bit_count != m {
            return Err(Error::Incompatible(format!(
                "bit counts differ: interface {m}, source {}, channel {}",
                self.source.bit_count(),
                self.channel.config.bit_count
            )));
        }
        Ok(())
    }

    /// Sends a `(batch, H, W, C)` batch through mapper, channel and demapper.
    /// Returns the reconstruction and per-image outcomes.
    pub fn transmit_batch<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        kind: ChannelKind,
        snr_db: f64,
        rng: &mut R,
    ) -> Result<(Tensor, Vec<ImageOutcome>)> {
        self.check()?;
        let b = x.dim(0)?;
        let importance = importance_tensor(self.spec)?;
        let bits = self.source.encode_hard(x)?;
        let snrs = vec![snr_db; b];
        let sent = self.channel.map_batch(&bits, &importance, &snrs)?.to_vec2::<f64>()?;
        let mut received = Vec::with_capacity(b * sent[0].len());
        let mut gains = Vec::with_capacity(b);
        for row in &sent {
            let symbols = channel::power_normalize(&channel::complex_from_reals(row)?)?;
            let (y, state) = channel::transmit(kind, &symbols, snr_db, rng);
            received.extend(channel::reals_from_complex(&channel::equalize(&y, &state)));
            gains.push(state.h.norm());
        }
        let z = Tensor::from_vec(received, (b, sent[0].len()), &nn::device())?;
        let probs = self.channel.demap_batch(&z, &importance, &snrs, &gains)?;
        let decided = round_half_up(&probs.flatten_all()?.to_vec1::<f64>()?);
        let bits_hat = Tensor::from_vec(decided, probs.dims(), &nn::device())?;
        let recon = self.source.decode_tensor(&bits_hat)?;
        let psnrs = metrics::batch_psnr(x, &recon)?;
        let sent_bits = bits.to_vec2::<f64>()?;
        let got_bits = bits_hat.to_vec2::<f64>()?;
        let outcomes = psnrs
            .into_iter()
            .zip(sent_bits.iter().zip(&got_bits))
            .map(|(psnr, (a, b))| {
                let errors = a.iter().zip(b).filter(|(x, y)| x != y).count();
                ImageOutcome {
                    psnr,
                    ber: errors as f64 / a.len() as f64,
                }
            })
            .collect();
        Ok((recon, outcomes))
    }

    /// Evaluates every image of `set` once at `snr_db`, with channel draws
    /// from a stream seeded by `seed`.
    pub fn evaluate(
        &self,
        set: &ImageSet,
        kind: ChannelKind,
        snr_db: f64,
        seed: u64,
        batch: usize,
    ) -> Result<Vec<ImageOutcome>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let indices: Vec<usize> = (0..set.len()).collect();
        let mut out = Vec::with_capacity(set.len());
        for chunk in indices.chunks(batch.max(1)) {
            let x = set.batch(chunk)?;
            out.extend(self.transmit_batch(&x, kind, snr_db, &mut rng)?.1);
        }
        Ok(out)
    }

    pub fn mean_psnr(&self, set: &ImageSet, kind: ChannelKind, snr_db: f64, seed: u64) -> Result<f64> {
        let outcomes = self.evaluate(set, kind, snr_db, seed, 256)?;
        Ok(metrics::mean(&outcomes.iter().map(|o| o.psnr).collect::<Vec<_>>()))
    }
}

/// The stochastic stage-2 objective on one batch.
pub fn stage2_step_loss<R: Rng + ?Sized>(
    source: &FrozenSource,
    codec: &ChannelCodec,
    importance: &Tensor,
    x: &Tensor,
    kind: ChannelKind,
    snr_db: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let b = x.dim(0)?;
    let bits = source.codec().encode_hard(x)?;
    let snrs = vec![snr_db; b];
    let sent = codec.map_batch(&bits, importance, &snrs)?;
    let (received, gains) = pass_channel(&sent, kind, &snrs, rng)?;
    let probs = codec.demap_batch(&received, importance, &snrs, &gains)?;
    let decided = interface::ops::sample_straight_through(&probs, rng)?;
    let recon = source.codec().decode_tensor(&decided)?;
    stage2_loss(x, &recon)
}

pub fn train_stage2(
    dataset: &DatasetHandle,
    source: &FrozenSource,
    spec: &InterfaceSpec,
    config: &Stage2Config,
) -> Result<Stage2Outcome> {
    train_stage2_with(dataset, source, spec, config, |_| {})
}

/// Trains mapper, demapper, importance-aware nets and modulation nets while
/// the source codec stays frozen.
pub fn train_stage2_with(
    dataset: &DatasetHandle,
    source: &FrozenSource,
    spec: &InterfaceSpec,
    config: &Stage2Config,
    mut on_epoch: impl FnMut(&Stage2Record),
) -> Result<Stage2Outcome> {
    let m = spec.bit_count();
    if source.codec().bit_count() != m || config.codec.bit_count != m {
        return Err(Error::Incompatible(format!(
            "interface has {m} bits, source codec {}, channel codec {}",
            source.codec().bit_count(),
            config.codec.bit_count
        )));
    }
    if dataset.shape() != source.codec().config().shape {
        return Err(Error::Incompatible(format!(
            "dataset shape {} differs from the source codec's {}",
            dataset.shape(),
            source.codec().config().shape
        )));
    }
    let mut store = ParamStore::new(config.seed);
    let codec = ChannelCodec::new(&mut store, &config.codec)?;
    let importance = importance_tensor(spec)?;
    let mut optimizer = candle_nn::AdamW::new(
        store.vars(),
        candle_nn::ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(5);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let mut seen = 0usize;
        for (step, batch) in dataset.batches(epoch, config.batch_size).iter().enumerate() {
            let x = dataset.train().batch(batch)?;
            let snr = config.snr.draw(&mut rng);
            let loss = stage2_step_loss(source, &codec, &importance, &x, config.channel, snr, &mut rng)?;
            let value = loss.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, step, loss: value });
            }
            optimizer.backward_step(&loss)?;
            total += value * batch.len() as f64;
            seen += batch.len();
        }
        let pipeline = Pipeline {
            source: source.codec(),
            channel: &codec,
            spec,
        };
        let psnr_val = config
            .probe_snrs
            .iter()
            .map(|&snr| {
                pipeline
                    .mean_psnr(dataset.test(), config.channel, snr, config.seed ^ PROBE_STREAM)
                    .map(|psnr| ProbePsnr { snr_db: snr, psnr })
            })
            .collect::<Result<Vec<_>>>()?;
        let record = Stage2Record {
            epoch,
            loss: total / seen as f64,
            psnr_val,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(Stage2Outcome { store, codec, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::image::ImageShape;
    use crate::source::{Backbone, SourceCodecConfig};

    fn dev() -> candle_core::Device {
        nn::device()
    }

    pub(crate) fn small_config(ablation: Ablation) -> ChannelCodecConfig {
        ChannelCodecConfig {
            bit_count: 24,
            symbol_count: 12,
            tokens: 6,
            dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            se_reduction: 4,
            cond_hidden: 8,
            ablation,
        }
    }

    fn spec(m: usize) -> InterfaceSpec {
        InterfaceSpec::new((0..m).map(|i| 0.05 + 0.4 * i as f64 / m as f64).collect(), "t").unwrap()
    }

    #[test]
    fn ablation_parsing_and_param_counts() {
        assert_eq!("no-ian".parse::<Ablation>().unwrap(), Ablation::NoIan);
        assert!("bogus".parse::<Ablation>().is_err());
        let count = |a| {
            let mut s = ParamStore::new(0);
            ChannelCodec::new(&mut s, &small_config(a)).unwrap();
            s.num_params()
        };
        assert!(count(Ablation::Full) > count(Ablation::NoIattn));
        assert!(count(Ablation::NoIattn) > count(Ablation::NoIan));
    }

    #[test]
    fn config_rejects_uneven_tokens() {
        let mut c = small_config(Ablation::Full);
        c.tokens = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ian_shape_and_degenerate_cases() {
        let mut store = ParamStore::new(1);
        let net = ImportanceAwareNet::new(&mut store, "ian", 4, 16, 4, Ablation::Full).unwrap();
        let x = Tensor::randn(0f64, 1.0, (3, 6, 16), &dev()).unwrap();
        let imp = Tensor::rand(0f64, 1.0, 24, &dev()).unwrap();
        let out = ian_forward(&IANInput::new(x.clone(), imp).unwrap(), &net).unwrap();
        assert_eq!(out.dims(), x.dims());

        // zero importance with zero projection bias: gates are exactly 1 and
        // only the SE stage acts
        let zeros = Tensor::zeros(24, nn::DTYPE, &dev()).unwrap();
        let out = ian_forward(&IANInput::new(x.clone(), zeros.clone()).unwrap(), &net).unwrap();
        let se_only = net.se().unwrap().forward(&x).unwrap();
        let diff = (out - se_only).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-15);
        let scores = net.attention().unwrap().scores(&zeros).unwrap();
        let v = scores.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|s| *s == 1.0));

        // wrong importance length
        let bad = Tensor::zeros(10, nn::DTYPE, &dev()).unwrap();
        assert!(IANInput::new(x, bad).is_err());
    }

    #[test]
    fn zeroed_se_bottleneck_gives_constant_gates() {
        let mut store = ParamStore::new(2);
        let se = SqueezeExcitation::new(&mut store, "se", 8, 2).unwrap();
        for (name, var) in store.named_vars() {
            if name.ends_with("weight") {
                var.set(&var.zeros_like().unwrap()).unwrap();
            }
        }
        let bias = store.var("se.expand.bias").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 5, 8), &dev()).unwrap();
        let g = se.gates(&x).unwrap().to_vec3::<f64>().unwrap();
        for row in &g {
            for (gate, b) in row[0].iter().zip(&bias) {
                assert!((gate - 1.0 / (1.0 + (-b).exp())).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn equal_epsilon_gives_position_independent_scores() {
        let mut store = ParamStore::new(3);
        let att = InterfaceAttention::new(&mut store, "a", 4, 16).unwrap();
        let flat = InterfaceSpec::new(vec![0.3; 24], "t").unwrap();
        let scores = att.scores(&importance_tensor(&flat).unwrap()).unwrap().to_vec2::<f64>().unwrap();
        for row in &scores[1..] {
            assert_eq!(row, &scores[0]);
        }
    }

    #[test]
    fn map_and_demap_contracts() {
        let mut store = ParamStore::new(4);
        let codec = ChannelCodec::new(&mut store, &small_config(Ablation::Full)).unwrap();
        let spec = spec(24);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let b: BitSequence = (0..24).map(|_| rng.random_bool(0.5)).collect();
            let x = map_bits(&b, &spec, 10.0, &codec).unwrap();
            assert_eq!(x.len(), 12);
            assert!((x.power() - 1.0).abs() < 1e-6);
            assert_eq!(map_bits(&b, &spec, 10.0, &codec).unwrap(), x);
            let (y, state) = channel::transmit_rayleigh(&x, 10.0, &mut rng);
            let p = demap_symbols(&y, &state, &spec, 10.0, &codec).unwrap();
            assert_eq!(p.len(), 24);
            assert!(p.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(demap_symbols(&y, &state, &spec, 10.0, &codec).unwrap(), p);
        }
        assert!(map_bits(&BitSequence::zeros(8), &spec, 10.0, &codec).is_err());
        let state = ChannelState {
            h: Complex64::new(1.0, 0.0),
            noise_sigma2: 0.1,
            snr_db: 10.0,
        };
        assert!(demap_symbols(&[Complex64::new(1.0, 0.0); 3], &state, &spec, 10.0, &codec).is_err());
    }

    #[test]
    fn normalize_rows_unit_power() {
        let x = Tensor::randn(0f64, 3.0, (5, 10), &dev()).unwrap();
        let y = normalize_rows(&x, 5).unwrap().to_vec2::<f64>().unwrap();
        for row in y {
            let p = row.iter().map(|v| v * v).sum::<f64>() / 5.0;
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stage2_freezes_source_and_smoke_trains() {
        let shape = ImageShape::new(8, 8, 3);
        let data = make_synthetic(8, shape, 1).unwrap();
        let src_cfg = SourceCodecConfig {
            shape,
            bit_count: 24,
            backbone: Backbone::Mlp { hidden: vec![16] },
        };
        let mut live = ParamStore::new(9);
        SourceCodec::new(&mut live, &src_cfg).unwrap();
        let before = live.checksum().unwrap();
        let (vars, names): (Vec<_>, Vec<_>) = live.named_vars().map(|(n, v)| (v.clone(), n.to_string())).unzip();
        let frozen = FrozenSource::new(live, &src_cfg).unwrap();

        let spec = spec(24);
        let mut store = ParamStore::new(5);
        let codec = ChannelCodec::new(&mut store, &small_config(Ablation::Full)).unwrap();
        let x = data.train().batch(&[0, 1, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let loss = stage2_step_loss(&frozen, &codec, &importance_tensor(&spec).unwrap(), &x, ChannelKind::Awgn, 10.0, &mut rng)
            .unwrap();
        let grads = loss.backward().unwrap();
        for (v, n) in vars.iter().zip(&names) {
            assert!(grads.get(v).is_none(), "gradient reached frozen `{n}`");
        }
        let reached = store.vars().iter().filter(|v| grads.get(v).is_some()).count();
        assert!(reached > 0);

        let cfg = Stage2Config {
            codec: small_config(Ablation::Full),
            channel: ChannelKind::Rayleigh,
            snr: SnrPolicy::Uniform { low: 5.0, high: 20.0 },
            epochs: 1,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 3,
            probe_snrs: vec![5.0, 10.0, 15.0, 20.0],
        };
        let out = train_stage2(&data, &frozen, &spec, &cfg).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.log[0].psnr_val.len(), 4);
        assert_eq!(frozen.checksum(), before);
        assert!(train_stage2(&data, &frozen, &InterfaceSpec::new(vec![0.2; 12], "x").unwrap(), &cfg).is_err());
    }
}
