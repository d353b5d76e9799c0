//! Experiment configuration: TOML on disk, fully resolved and validated in
//! memory, with every default materialized so a serialized config describes
//! its run completely.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{self, ChannelKind};
use crate::channel_codec::{Ablation, ChannelCodecConfig, SnrPolicy, Stage2Config};
use crate::data::{DatasetHandle, DatasetSource};
use crate::error::{Error, Result};
use crate::image::ImageShape;
use crate::source::{Backbone, SourceCodecConfig, Stage1Config};

pub const SCHEMA_VERSION: u32 = 1;

/// Tolerance for matching a declared CBR against `L / (H W C)`.
pub const CBR_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    #[serde(default)]
    pub stage1: Stage1Section,
    #[serde(default)]
    pub stage2: Stage2Section,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Complex channel uses `L` per image.
    pub symbol_count: usize,
    /// Declared bandwidth ratio; derived from `L` when absent.
    #[serde(default)]
    pub cbr: Option<f64>,
    /// Latent bit count `M`; defaults to `2 L · bits_per_symbol`.
    #[serde(default)]
    pub bit_count: Option<usize>,
    #[serde(default = "default_bits_per_symbol")]
    pub bits_per_symbol: usize,
    #[serde(default = "default_backbone")]
    pub backbone: Backbone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Section {
    pub lambda: f64,
    pub init_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            init_epsilon: 0.25,
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Section {
    pub channel: ChannelKind,
    pub snr: SnrPolicy,
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to 1e-4 for AWGN and 5e-4 for Rayleigh.
    pub learning_rate: Option<f64>,
    /// Token count; defaults to the largest divisor of both `M` and `2L` not above 16.
    pub tokens: Option<usize>,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub se_reduction: usize,
    pub cond_hidden: usize,
    pub ablation: Ablation,
    pub probe_snrs: Vec<f64>,
    /// Defaults to the top-level seed.
    pub seed: Option<u64>,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self {
            channel: ChannelKind::Awgn,
            snr: SnrPolicy::Uniform {
                low: 5.0,
                high: 20.0,
            },
            epochs: 10,
            batch_size: 128,
            learning_rate: None,
            tokens: None,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            se_reduction: 4,
            cond_hidden: 32,
            ablation: Ablation::Full,
            probe_snrs: vec![5.0, 10.0, 15.0, 20.0],
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub snrs: Vec<f64>,
    pub seeds: Vec<u64>,
    pub channels: Vec<ChannelKind>,
    pub ablation_seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            snrs: vec![5.0, 10.0, 15.0, 20.0],
            seeds: vec![0, 1, 2],
            channels: vec![ChannelKind::Awgn, ChannelKind::Rayleigh],
            ablation_seeds: vec![0, 1, 2],
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_bits_per_symbol() -> usize {
    2
}

fn default_backbone() -> Backbone {
    Backbone::WindowTransformer {
        patch: 2,
        dim: 48,
        depth: 2,
        heads: 4,
        window: 4,
        mlp_ratio: 2,
    }
}

/// Largest `t <= 16` dividing both `m` and `n`.
fn default_tokens(m: usize, n: usize) -> usize {
    (1..=16).rev().find(|t| m % t == 0 && n % t == 0).unwrap_or(1)
}

/// Command-line overrides applied before defaults are derived.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub stage2_seed: Option<u64>,
    /// Sets `L = cbr * H * W * C`, which must be a whole number.
    pub cbr: Option<f64>,
    pub channel: Option<ChannelKind>,
    pub ablation: Option<Ablation>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_str_with(text, &Overrides::default())
    }

    pub fn from_toml_str_with(text: &str, overrides: &Overrides) -> Result<Self> {
        let mut config: Self =
            toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(seed) = overrides.stage2_seed {
            config.stage2.seed = Some(seed);
        }
        if let Some(channel) = overrides.channel {
            if config.stage2.channel != channel {
                config.stage2.channel = channel;
                config.stage2.learning_rate = None;
            }
        }
        if let Some(ablation) = overrides.ablation {
            config.stage2.ablation = ablation;
        }
        if let Some(cbr) = overrides.cbr {
            let numel = config.dataset_shape().map_err(|e| Error::Config(vec![format!("dataset: {e}")]))?.numel();
            let l = cbr * numel as f64;
            if !(cbr > 0.0) || (l - l.round()).abs() > 1e-6 {
                return Err(Error::Config(vec![format!(
                    "--cbr: {cbr} x {numel} source dimensions is not a whole number of symbols"
                )]));
            }
            config.model.symbol_count = l.round() as usize;
            config.model.cbr = Some(cbr);
            config.stage2.tokens = None;
        }
        config.resolve()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with(path, &Overrides::default())
    }

    pub fn load_with(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str_with(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Image shape of the configured dataset; raw containers are read.
    pub fn dataset_shape(&self) -> Result<ImageShape> {
        match self.dataset.shape() {
            Some(shape) => Ok(shape),
            None => {
                let path = self.dataset.resolved_path().expect("raw source has a path");
                Ok(DatasetHandle::load_raw(&path)?.shape())
            }
        }
    }

    /// Fills derived defaults and validates every field, reporting all
    /// problems at once.
    pub fn resolve(mut self) -> Result<Self> {
        let mut problems = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            problems.push(format!(
                "schema_version: {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if let Some(path) = self.dataset.resolved_path() {
            if !path.exists() {
                problems.push(format!("dataset: path {} does not exist", path.display()));
            }
        }
        let shape = match self.dataset_shape() {
            Ok(shape) => Some(shape),
            Err(e) if problems.is_empty() => {
                problems.push(format!("dataset: {e}"));
                None
            }
            Err(_) => None,
        };

        let l = self.model.symbol_count;
        if l == 0 {
            problems.push("model.symbol_count: must be positive".into());
        }
        if let Some(actual) = shape.and_then(|s| channel::cbr(l, s.height, s.width, s.channels).ok()) {
            let shape = shape.expect("shape resolved");
            match self.model.cbr {
                Some(target) if (target - actual).abs() > CBR_TOLERANCE => problems.push(format!(
                    "model.cbr: {target} does not match L/(H*W*C) = {l}/{} = {actual}",
                    shape.numel()
                )),
                Some(_) => {}
                None => self.model.cbr = Some(actual),
            }
        }
        if self.model.bits_per_symbol == 0 && self.model.bit_count.is_none() {
            problems.push("model.bits_per_symbol: must be positive".into());
        }
        let m = *self
            .model
            .bit_count
            .get_or_insert(2 * l * self.model.bits_per_symbol);
        if m == 0 {
            problems.push("model.bit_count: must be positive".into());
        }

        let s1 = &self.stage1;
        if !(s1.lambda >= 0.0 && s1.lambda.is_finite()) {
            problems.push(format!("stage1.lambda: {} must be finite and >= 0", s1.lambda));
        }
        if !(s1.init_epsilon > 0.0 && s1.init_epsilon <= 0.5) {
            problems.push(format!("stage1.init_epsilon: {} must lie in (0, 0.5]", s1.init_epsilon));
        }
        if s1.batch_size == 0 {
            problems.push("stage1.batch_size: must be positive".into());
        }
        if !(s1.learning_rate > 0.0) {
            problems.push(format!("stage1.learning_rate: {} must be positive", s1.learning_rate));
        }

        let s2 = &mut self.stage2;
        s2.seed.get_or_insert(self.seed);
        match s2.snr {
            SnrPolicy::Uniform { low, high } if !(low <= high) => {
                problems.push(format!("stage2.snr: low {low} exceeds high {high}"))
            }
            SnrPolicy::Uniform { low, high } if !(low.is_finite() && high.is_finite()) => {
                problems.push("stage2.snr: bounds must be finite".into())
            }
            SnrPolicy::Fixed { db } if !db.is_finite() => {
                problems.push("stage2.snr: db must be finite".into())
            }
            _ => {}
        }
        if s2.batch_size == 0 {
            problems.push("stage2.batch_size: must be positive".into());
        }
        let lr = *s2.learning_rate.get_or_insert(match s2.channel {
            ChannelKind::Awgn => 1e-4,
            ChannelKind::Rayleigh => 5e-4,
        });
        if !(lr > 0.0) {
            problems.push(format!("stage2.learning_rate: {lr} must be positive"));
        }
        let t = *s2.tokens.get_or_insert(default_tokens(m.max(1), (2 * l).max(1)));
        if t == 0 || m % t != 0 || (2 * l) % t != 0 {
            problems.push(format!("stage2.tokens: {t} must divide M = {m} and 2L = {}", 2 * l));
        }
        if s2.heads == 0 || s2.dim % s2.heads != 0 {
            problems.push(format!("stage2.heads: {} must divide stage2.dim = {}", s2.heads, s2.dim));
        }
        if s2.probe_snrs.iter().any(|s| !s.is_finite()) {
            problems.push("stage2.probe_snrs: values must be finite".into());
        }
        if self.eval.seeds.is_empty() {
            problems.push("eval.seeds: at least one seed required".into());
        }
        if self.eval.snrs.is_empty() {
            problems.push("eval.snrs: at least one SNR required".into());
        }

        if problems.is_empty() {
            let codec = self.source_codec_config(shape.expect("shape resolved"));
            if let Err(e) = codec.validate() {
                problems.push(format!("model.backbone: {e}"));
            }
            if let Err(e) = self.channel_codec_config().validate() {
                problems.push(format!("stage2: {e}"));
            }
        }
        if problems.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn bit_count(&self) -> usize {
        self.model.bit_count.expect("resolved config")
    }

    pub fn cbr(&self) -> f64 {
        self.model.cbr.expect("resolved config")
    }

    pub fn source_codec_config(&self, shape: ImageShape) -> SourceCodecConfig {
        SourceCodecConfig {
            shape,
            bit_count: self.bit_count(),
            backbone: self.model.backbone.clone(),
        }
    }

    pub fn stage1_config(&self, shape: ImageShape) -> Stage1Config {
        Stage1Config {
            codec: self.source_codec_config(shape),
            lambda: self.stage1.lambda,
            init_epsilon: self.stage1.init_epsilon,
            epochs: self.stage1.epochs,
            batch_size: self.stage1.batch_size,
            learning_rate: self.stage1.learning_rate,
            seed: self.seed,
        }
    }

    pub fn channel_codec_config(&self) -> ChannelCodecConfig {
        let s2 = &self.stage2;
        ChannelCodecConfig {
            bit_count: self.bit_count(),
            symbol_count: self.model.symbol_count,
            tokens: s2.tokens.expect("resolved config"),
            dim: s2.dim,
            depth: s2.depth,
            heads: s2.heads,
            mlp_ratio: s2.mlp_ratio,
            se_reduction: s2.se_reduction,
            cond_hidden: s2.cond_hidden,
            ablation: s2.ablation,
        }
    }

    pub fn stage2_config(&self) -> Stage2Config {
        Stage2Config {
            codec: self.channel_codec_config(),
            channel: self.stage2.channel,
            snr: self.stage2.snr,
            epochs: self.stage2.epochs,
            batch_size: self.stage2.batch_size,
            learning_rate: self.stage2.learning_rate.expect("resolved config"),
            seed: self.stage2.seed.unwrap_or(self.seed),
            probe_snrs: self.stage2.probe_snrs.clone(),
        }
    }

    /// Hash of the whole resolved config.
    pub fn config_hash(&self) -> String {
        hash_json(self)
    }

    /// Hash of the parts that determine stage-1 artifacts. Stage-2 runs
    /// compare this against the hash stored with the stage-1 checkpoint.
    pub fn source_hash(&self) -> String {
        #[derive(Serialize)]
        struct SourcePart<'a> {
            schema_version: u32,
            seed: u64,
            dataset: &'a DatasetSource,
            model: &'a ModelConfig,
            stage1: &'a Stage1Section,
        }
        hash_json(&SourcePart {
            schema_version: self.schema_version,
            seed: self.seed,
            dataset: &self.dataset,
            model: &self.model,
            stage1: &self.stage1,
        })
    }
}

fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(bytes)[..16])
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
schema_version = 1
seed = 3

[dataset]
kind = "synthetic"
train_count = 16
test_count = 4
height = 8
width = 8
channels = 3

[model]
symbol_count = 24
cbr = 0.125
backbone = { kind = "mlp", hidden = [32] }
"#;

    fn problems(text: &str) -> Vec<String> {
        match ExperimentConfig::from_toml_str(text) {
            Err(Error::Config(p)) => p,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn defaults_are_materialized() {
        let c = ExperimentConfig::from_toml_str(BASE).unwrap();
        assert_eq!(c.bit_count(), 96);
        assert_eq!(c.stage2.learning_rate, Some(1e-4));
        assert_eq!(c.stage2.tokens, Some(16));
        assert_eq!(c.stage1.lambda, 1.0);
        let text = c.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
    }

    #[test]
    fn rayleigh_learning_rate_default() {
        let text = format!("{BASE}\n[stage2]\nchannel = \"rayleigh\"\n");
        let c = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(c.stage2.learning_rate, Some(5e-4));
    }

    #[test]
    fn negative_lambda_names_field() {
        let text = format!("{BASE}\n[stage1]\nlambda = -1.0\n");
        let p = problems(&text);
        assert!(p.iter().any(|m| m.starts_with("stage1.lambda")), "{p:?}");
    }

    #[test]
    fn cbr_mismatch_and_snr_order() {
        let text = BASE.replace("cbr = 0.125", "cbr = 0.25")
            + "\n[stage2]\nsnr = { kind = \"uniform\", low = 20.0, high = 5.0 }\n";
        let p = problems(&text);
        assert!(p.iter().any(|m| m.starts_with("model.cbr")), "{p:?}");
        assert!(p.iter().any(|m| m.starts_with("stage2.snr")), "{p:?}");
    }

    #[test]
    fn unknown_fields_and_schema_rejected() {
        assert!(!problems(&BASE.replace("seed = 3", "seed = 3\nbogus = 1")).is_empty());
        let p = problems(&BASE.replace("schema_version = 1", "schema_version = 9"));
        assert!(p[0].starts_with("schema_version"));
    }

    #[test]
    fn missing_dataset_path_reported() {
        let text = BASE.replace(
            "kind = \"synthetic\"\ntrain_count = 16\ntest_count = 4\nheight = 8\nwidth = 8\nchannels = 3",
            "kind = \"raw\"\npath = \"/nonexistent/set.raw\"",
        );
        let p = problems(&text);
        assert!(p.iter().any(|m| m.starts_with("dataset")), "{p:?}");
    }

    #[test]
    fn source_hash_ignores_stage2() {
        let a = ExperimentConfig::from_toml_str(BASE).unwrap();
        let b = ExperimentConfig::from_toml_str(&format!("{BASE}\n[stage2]\nepochs = 3\n")).unwrap();
        assert_eq!(a.source_hash(), b.source_hash());
        assert_ne!(a.config_hash(), b.config_hash());
        let c = ExperimentConfig::from_toml_str(&format!("{BASE}\n[stage1]\nepochs = 3\n")).unwrap();
        assert_ne!(a.source_hash(), c.source_hash());
    }

    #[test]
    fn overrides_rederive_defaults() {
        let o = Overrides {
            cbr: Some(0.25),
            channel: Some(ChannelKind::Rayleigh),
            seed: Some(11),
            ..Default::default()
        };
        let text = BASE.replace("cbr = 0.125\n", "");
        let c = ExperimentConfig::from_toml_str_with(&text, &o).unwrap();
        assert_eq!(c.model.symbol_count, 48);
        assert_eq!(c.bit_count(), 192);
        assert_eq!(c.stage2.learning_rate, Some(5e-4));
        assert_eq!(c.seed, 11);
        let bad = Overrides {
            cbr: Some(0.1),
            ..Default::default()
        };
        assert!(matches!(ExperimentConfig::from_toml_str_with(&text, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn token_default_divides_both() {
        assert_eq!(default_tokens(96, 48), 16);
        assert_eq!(default_tokens(24, 12), 12);
        assert_eq!(default_tokens(7, 12), 1);
    }
}
