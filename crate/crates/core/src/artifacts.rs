//! On-disk layout of stage-1 and stage-2 run directories and the
//! compatibility checks between them.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::channel_codec::{Ablation, ChannelCodec, FrozenSource, Stage2Outcome, Stage2Record};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::image::ImageShape;
use crate::interface::InterfaceSpec;
use crate::nn::ParamStore;
use crate::source::{Stage1Outcome, Stage1Record};

pub const SOURCE_CHECKPOINT: &str = "source.safetensors";
pub const INTERFACE_FILE: &str = "interface.bsc";
pub const STAGE1_LOG: &str = "stage1_log.jsonl";
pub const CHANNEL_CHECKPOINT: &str = "channel.safetensors";
pub const STAGE2_LOG: &str = "stage2_log.jsonl";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const MANIFEST: &str = "manifest.json";

pub mod keys {
    pub const CONFIG_HASH: &str = "config_hash";
    pub const SOURCE_HASH: &str = "source_hash";
    pub const INTERFACE_FINGERPRINT: &str = "interface_fingerprint";
    pub const TRAINING_FINGERPRINT: &str = "training_fingerprint";
    pub const ABLATION: &str = "ablation";
    pub const CONFIG: &str = "config";
    pub const SHAPE: &str = "shape";
}

/// Content hash of a serialized interface spec.
pub fn interface_fingerprint(spec: &InterfaceSpec) -> String {
    hex::encode(&Sha256::digest(spec.to_bytes())[..16])
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Creates `dir`, refusing to reuse a non-empty directory unless `force`.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(Error::InvalidArgument {
                name: "output",
                reason: format!("{} already exists and is not empty (use --force)", dir.display()),
            });
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn base_metadata(config: &ExperimentConfig) -> Result<HashMap<String, String>> {
    Ok(HashMap::from([
        (keys::CONFIG_HASH.into(), config.config_hash()),
        (keys::SOURCE_HASH.into(), config.source_hash()),
        (keys::CONFIG.into(), serde_json::to_string(config)?),
    ]))
}

/// Paths written for a stage-1 run.
#[derive(Debug, Clone)]
pub struct Stage1Paths {
    pub checkpoint: PathBuf,
    pub interface: PathBuf,
    pub log: PathBuf,
}

pub fn save_stage1(dir: &Path, config: &ExperimentConfig, outcome: &Stage1Outcome) -> Result<Stage1Paths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = Stage1Paths {
        checkpoint: dir.join(SOURCE_CHECKPOINT),
        interface: dir.join(INTERFACE_FILE),
        log: dir.join(STAGE1_LOG),
    };
    let mut meta = base_metadata(config)?;
    meta.insert(keys::INTERFACE_FINGERPRINT.into(), interface_fingerprint(&outcome.spec));
    meta.insert(
        keys::TRAINING_FINGERPRINT.into(),
        outcome.spec.training_fingerprint().to_string(),
    );
    meta.insert(keys::SHAPE.into(), serde_json::to_string(&outcome.codec.config().shape)?);
    outcome.store.save(&paths.checkpoint, meta)?;
    outcome.spec.save(&paths.interface)?;
    write_jsonl(&paths.log, &outcome.log)?;
    let toml = config.to_toml_string()?;
    let cfg_path = dir.join(RESOLVED_CONFIG);
    std::fs::write(&cfg_path, toml).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(paths)
}

/// A loaded stage-1 run: frozen source codec plus its interface.
pub struct Stage1Artifacts {
    pub source: FrozenSource,
    pub spec: InterfaceSpec,
    pub metadata: HashMap<String, String>,
    pub log: Vec<Stage1Record>,
}

impl Stage1Artifacts {
    pub fn source_hash(&self) -> &str {
        self.metadata.get(keys::SOURCE_HASH).map(String::as_str).unwrap_or("")
    }

    pub fn interface_fingerprint(&self) -> String {
        interface_fingerprint(&self.spec)
    }
}

/// Loads a stage-1 directory and checks it against `config`: the source
/// hash must match and the interface file must be the one the checkpoint
/// was written with.
pub fn load_stage1(dir: &Path, config: &ExperimentConfig) -> Result<Stage1Artifacts> {
    let (store, metadata) = ParamStore::load(&dir.join(SOURCE_CHECKPOINT), config.seed)?;
    let spec = InterfaceSpec::load(&dir.join(INTERFACE_FILE))?;
    let stored = metadata.get(keys::SOURCE_HASH).cloned().unwrap_or_default();
    if stored != config.source_hash() {
        return Err(Error::Incompatible(format!(
            "stage-1 artifacts in {} were trained with source hash {stored}, config has {}",
            dir.display(),
            config.source_hash()
        )));
    }
    let fp = metadata
        .get(keys::INTERFACE_FINGERPRINT)
        .cloned()
        .unwrap_or_default();
    if fp != interface_fingerprint(&spec) {
        return Err(Error::Incompatible(format!(
            "{} does not match the checkpoint's interface fingerprint {fp}",
            INTERFACE_FILE
        )));
    }
    let shape: ImageShape = match metadata.get(keys::SHAPE) {
        Some(s) => serde_json::from_str(s)?,
        None => config.dataset_shape()?,
    };
    let source = FrozenSource::new(store, &config.source_codec_config(shape))?;
    let log_path = dir.join(STAGE1_LOG);
    let log = if log_path.exists() {
        read_jsonl(&log_path)?
    } else {
        Vec::new()
    };
    Ok(Stage1Artifacts {
        source,
        spec,
        metadata,
        log,
    })
}

#[derive(Debug, Clone)]
pub struct Stage2Paths {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn save_stage2(
    dir: &Path,
    config: &ExperimentConfig,
    spec: &InterfaceSpec,
    outcome: &Stage2Outcome,
) -> Result<Stage2Paths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = Stage2Paths {
        checkpoint: dir.join(CHANNEL_CHECKPOINT),
        log: dir.join(STAGE2_LOG),
    };
    let mut meta = base_metadata(config)?;
    meta.insert(keys::INTERFACE_FINGERPRINT.into(), interface_fingerprint(spec));
    meta.insert(keys::ABLATION.into(), outcome.codec.config().ablation.to_string());
    outcome.store.save(&paths.checkpoint, meta)?;
    write_jsonl(&paths.log, &outcome.log)?;
    let cfg_path = dir.join(RESOLVED_CONFIG);
    std::fs::write(&cfg_path, config.to_toml_string()?).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(paths)
}

pub struct Stage2Artifacts {
    pub store: ParamStore,
    pub codec: ChannelCodec,
    pub metadata: HashMap<String, String>,
    pub log: Vec<Stage2Record>,
    pub config: ExperimentConfig,
}

impl Stage2Artifacts {
    pub fn ablation(&self) -> Ablation {
        self.codec.config().ablation
    }
}

/// Loads a stage-2 checkpoint trained against `spec`. The channel codec's
/// architecture is taken from the config embedded in the checkpoint.
pub fn load_stage2(dir: &Path, spec: &InterfaceSpec) -> Result<Stage2Artifacts> {
    let (store, metadata) = ParamStore::load(&dir.join(CHANNEL_CHECKPOINT), 0)?;
    let fp = metadata
        .get(keys::INTERFACE_FINGERPRINT)
        .cloned()
        .unwrap_or_default();
    if fp != interface_fingerprint(spec) {
        return Err(Error::Incompatible(format!(
            "channel codec in {} was trained against interface {fp}, not {}",
            dir.display(),
            interface_fingerprint(spec)
        )));
    }
    let config: ExperimentConfig = serde_json::from_str(
        metadata
            .get(keys::CONFIG)
            .ok_or_else(|| Error::Incompatible("checkpoint has no embedded config".into()))?,
    )?;
    let mut store = store.freeze();
    let codec = ChannelCodec::new(&mut store, &config.channel_codec_config())?;
    let log_path = dir.join(STAGE2_LOG);
    let log = if log_path.exists() {
        read_jsonl(&log_path)?
    } else {
        Vec::new()
    };
    Ok(Stage2Artifacts {
        store,
        codec,
        metadata,
        log,
        config,
    })
}

/// Metadata and embedded config of a checkpoint, without building a model.
pub fn read_checkpoint_config(path: &Path) -> Result<(ExperimentConfig, HashMap<String, String>)> {
    let (_, metadata) = ParamStore::load(path, 0)?;
    let config = serde_json::from_str(
        metadata
            .get(keys::CONFIG)
            .ok_or_else(|| Error::Incompatible(format!("{} has no embedded config", path.display())))?,
    )?;
    Ok((config, metadata))
}

/// Stage-2 run manifest: provenance for one trained channel codec.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Stage2Manifest {
    pub config_hash: String,
    pub source_hash: String,
    pub interface_fingerprint: String,
    pub training_fingerprint: String,
    pub stage1_dir: PathBuf,
    pub channel: crate::channel::ChannelKind,
    pub ablation: Ablation,
    pub cbr: f64,
    pub seed: u64,
}

/// A complete trained pipeline loaded from a stage-2 directory.
pub struct Run {
    pub stage1_dir: PathBuf,
    pub stage1: Stage1Artifacts,
    pub stage2: Stage2Artifacts,
}

impl Run {
    pub fn config(&self) -> &ExperimentConfig {
        &self.stage2.config
    }
}

/// Loads a stage-2 directory and the stage-1 run it was trained against.
/// The stage-1 location comes from the manifest unless given.
pub fn load_run(stage2_dir: &Path, stage1_dir: Option<&Path>) -> Result<Run> {
    let stage1_dir = match stage1_dir {
        Some(d) => d.to_path_buf(),
        None => {
            let path = stage2_dir.join(MANIFEST);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let manifest: Stage2Manifest = serde_json::from_str(&text)?;
            manifest.stage1_dir
        }
    };
    let (config, _) = read_checkpoint_config(&stage2_dir.join(CHANNEL_CHECKPOINT))?;
    let stage1 = load_stage1(&stage1_dir, &config)?;
    let stage2 = load_stage2(stage2_dir, &stage1.spec)?;
    Ok(Run {
        stage1_dir,
        stage1,
        stage2,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
