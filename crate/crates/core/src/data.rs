//! Dataset ingestion: synthetic desk-scale images, the CIFAR binary archives,
//! and a raw 8-bit tensor container for anything converted offline.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{Image, ImageShape};
use crate::nn;

pub const RAW_MAGIC: &[u8; 8] = b"IJSCCRAW";
pub const RAW_VERSION: u32 = 1;
/// Bumped whenever the synthetic generator changes its output for a given seed.
pub const SYNTHETIC_GENERATOR_VERSION: u32 = 1;

/// 8-bit images of one shape, stored contiguously in HWC order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSet {
    data: Vec<u8>,
    shape: ImageShape,
}

impl ImageSet {
    pub fn new(data: Vec<u8>, shape: ImageShape) -> Result<Self> {
        if shape.numel() == 0 || data.len() % shape.numel() != 0 {
            return Err(Error::shape(
                format!("a multiple of {}", shape.numel()),
                data.len(),
            ));
        }
        Ok(Self { data, shape })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.shape.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        let n = self.shape.numel();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn image(&self, i: usize) -> Image {
        Image::from_u8(self.raw(i), self.shape).expect("stored images are in range")
    }

    /// `(len(indices), H, W, C)` tensor normalized to `[0, 1]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let mut values = Vec::with_capacity(indices.len() * self.shape.numel());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument {
                    name: "indices",
                    reason: format!("index {i} out of range for {} images", self.len()),
                });
            }
            values.extend(self.raw(i).iter().map(|&b| b as f64 / 255.0));
        }
        Ok(Tensor::from_vec(
            values,
            (
                indices.len(),
                self.shape.height,
                self.shape.width,
                self.shape.channels,
            ),
            &nn::device(),
        )?)
    }

    fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.shape.numel());
        for &i in indices {
            data.extend_from_slice(self.raw(i));
        }
        Self {
            data,
            shape: self.shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHandle {
    name: String,
    shape: ImageShape,
    train: ImageSet,
    test: ImageSet,
    seed: u64,
}

impl DatasetHandle {
    pub fn new(name: impl Into<String>, train: ImageSet, test: ImageSet, seed: u64) -> Result<Self> {
        if train.shape != test.shape {
            return Err(Error::shape(train.shape, test.shape));
        }
        Ok(Self {
            name: name.into(),
            shape: train.shape,
            train,
            test,
            seed,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn train(&self) -> &ImageSet {
        &self.train
    }

    pub fn test(&self) -> &ImageSet {
        &self.test
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Training-set permutation for one epoch, a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }

    pub fn batches(&self, epoch: usize, batch_size: usize) -> Vec<Vec<usize>> {
        self.epoch_order(epoch)
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Keeps `n` distinct training images chosen by `seed` (in ascending index order).
    pub fn subsample_train(&self, n: usize, seed: u64) -> Result<Self> {
        if n > self.train.len() {
            return Err(Error::InvalidArgument {
                name: "n",
                reason: format!("cannot sample {n} of {} training images", self.train.len()),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, self.train.len(), n).into_vec();
        picked.sort_unstable();
        Ok(Self {
            train: self.train.select(&picked),
            ..self.clone()
        })
    }

    pub fn limit_test(&self, n: usize) -> Self {
        let keep: Vec<usize> = (0..n.min(self.test.len())).collect();
        Self {
            test: self.test.select(&keep),
            ..self.clone()
        }
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(RAW_MAGIC);
        out.extend_from_slice(&RAW_VERSION.to_le_bytes());
        for d in [self.shape.height, self.shape.width, self.shape.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.train.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.test.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let mut hasher = Sha256::new();
        hasher.update(self.train.bytes());
        hasher.update(self.test.bytes());
        out.extend_from_slice(&hasher.finalize());
        out.extend_from_slice(self.train.bytes());
        out.extend_from_slice(self.test.bytes());
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupted = |reason: &str| Error::Corrupted {
            what: path.display().to_string(),
            reason: reason.into(),
        };
        const HEADER: usize = 8 + 4 + 12 + 8 + 8 + 8 + 32;
        if bytes.len() < HEADER || &bytes[..8] != RAW_MAGIC {
            return Err(corrupted("not a raw image container"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(8);
        if version != RAW_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: RAW_VERSION,
            });
        }
        let shape = ImageShape::new(u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize);
        let (n_train, n_test, seed) = (u64_at(24) as usize, u64_at(32) as usize, u64_at(40));
        let body = &bytes[HEADER..];
        if body.len() != (n_train + n_test) * shape.numel() {
            return Err(corrupted("payload length does not match header"));
        }
        if Sha256::digest(body).as_slice() != &bytes[48..80] {
            return Err(corrupted("checksum mismatch"));
        }
        let split = n_train * shape.numel();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "raw".into());
        Self::new(
            name,
            ImageSet::new(body[..split].to_vec(), shape)?,
            ImageSet::new(body[split..].to_vec(), shape)?,
            seed,
        )
    }
}

/// Where a dataset comes from, as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic {
        train_count: usize,
        test_count: usize,
        height: usize,
        width: usize,
        channels: usize,
    },
    Cifar10 {
        #[serde(default)]
        root: Option<PathBuf>,
    },
    Cifar100 {
        #[serde(default)]
        root: Option<PathBuf>,
    },
    Raw {
        path: PathBuf,
    },
}

/// Environment variable overriding the on-disk dataset root.
pub const DATA_ROOT_ENV: &str = "IJSCC_DATA_ROOT";

impl DatasetSource {
    pub fn shape(&self) -> Option<ImageShape> {
        match self {
            DatasetSource::Synthetic {
                height,
                width,
                channels,
                ..
            } => Some(ImageShape::new(*height, *width, *channels)),
            DatasetSource::Cifar10 { .. } | DatasetSource::Cifar100 { .. } => {
                Some(ImageShape::new(32, 32, 3))
            }
            DatasetSource::Raw { .. } => None,
        }
    }

    /// On-disk location this source reads from, after applying the
    /// environment override. `None` for synthetic data.
    pub fn resolved_path(&self) -> Option<PathBuf> {
        let env_root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        match self {
            DatasetSource::Synthetic { .. } => None,
            DatasetSource::Cifar10 { root } | DatasetSource::Cifar100 { root } => Some(
                env_root
                    .or_else(|| root.clone())
                    .unwrap_or_else(|| PathBuf::from("data")),
            ),
            DatasetSource::Raw { path } => Some(match env_root {
                Some(r) if path.is_relative() => r.join(path),
                _ => path.clone(),
            }),
        }
    }

    pub fn open(&self, seed: u64) -> Result<DatasetHandle> {
        let path = self.resolved_path();
        let path = || path.clone().expect("on-disk source has a path");
        match self {
            DatasetSource::Synthetic {
                train_count,
                test_count,
                height,
                width,
                channels,
            } => make_synthetic_split(
                *train_count,
                *test_count,
                ImageShape::new(*height, *width, *channels),
                seed,
            ),
            DatasetSource::Cifar10 { .. } => load_dataset("cifar10", &path(), seed),
            DatasetSource::Cifar100 { .. } => load_dataset("cifar100", &path(), seed),
            DatasetSource::Raw { .. } => load_dataset("raw", &path(), seed),
        }
    }
}

/// Opens a named on-disk dataset.
///
/// `cifar10` and `cifar100` read the binary-version archives under `root`
/// (either directly or in the archive's own extracted subdirectory); `raw`
/// reads a container written by [`DatasetHandle::save_raw`] at path `root`.
/// When a `SHA256SUMS` file sits next to the archive files it is verified.
pub fn load_dataset(name: &str, root: &Path, seed: u64) -> Result<DatasetHandle> {
    match name {
        "cifar10" => {
            let dir = locate(root, "cifar-10-batches-bin", "test_batch.bin")?;
            let train: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
            load_cifar(&dir, "cifar10", &train, &["test_batch.bin".into()], 1, seed)
        }
        "cifar100" => {
            let dir = locate(root, "cifar-100-binary", "test.bin")?;
            load_cifar(&dir, "cifar100", &["train.bin".into()], &["test.bin".into()], 2, seed)
        }
        "raw" => {
            let mut handle = DatasetHandle::load_raw(root)?;
            handle.seed = seed;
            Ok(handle)
        }
        other => Err(Error::InvalidArgument {
            name: "name",
            reason: format!("unknown dataset `{other}`"),
        }),
    }
}

fn locate(root: &Path, subdir: &str, probe: &str) -> Result<PathBuf> {
    [root.join(subdir), root.to_path_buf()]
        .into_iter()
        .find(|d| d.join(probe).is_file())
        .ok_or_else(|| Error::NotFound(root.join(subdir).join(probe)))
}

fn verify_sums(dir: &Path, file: &str, bytes: &[u8]) -> Result<()> {
    let sums = dir.join("SHA256SUMS");
    let Ok(listing) = std::fs::read_to_string(&sums) else {
        return Ok(());
    };
    for line in listing.lines() {
        let mut parts = line.split_whitespace();
        if let (Some(hash), Some(name)) = (parts.next(), parts.next()) {
            if name.trim_start_matches('*') == file {
                let actual = hex::encode(Sha256::digest(bytes));
                if !actual.eq_ignore_ascii_case(hash) {
                    return Err(Error::Corrupted {
                        what: dir.join(file).display().to_string(),
                        reason: "checksum mismatch".into(),
                    });
                }
            }
        }
    }
    Ok(())
}

fn load_cifar(
    dir: &Path,
    name: &str,
    train_files: &[String],
    test_files: &[String],
    label_bytes: usize,
    seed: u64,
) -> Result<DatasetHandle> {
    let shape = ImageShape::new(32, 32, 3);
    let read = |files: &[String]| -> Result<ImageSet> {
        let mut data = Vec::new();
        for file in files {
            let path = dir.join(file);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            verify_sums(dir, file, &bytes)?;
            let record = label_bytes + 3072;
            if bytes.len() % record != 0 {
                return Err(Error::Corrupted {
                    what: path.display().to_string(),
                    reason: format!("length {} is not a multiple of {record}", bytes.len()),
                });
            }
            for rec in bytes.chunks_exact(record) {
                let planes = &rec[label_bytes..];
                // stored as three 32x32 planes (R, G, B)
                for p in 0..1024 {
                    data.extend_from_slice(&[planes[p], planes[1024 + p], planes[2048 + p]]);
                }
            }
        }
        ImageSet::new(data, shape)
    };
    DatasetHandle::new(name, read(train_files)?, read(test_files)?, seed)
}

/// `n` training images plus a disjoint test split of `max(1, n / 4)`.
pub fn make_synthetic(n: usize, shape: ImageShape, seed: u64) -> Result<DatasetHandle> {
    make_synthetic_split(n, (n / 4).max(1), shape, seed)
}

pub fn make_synthetic_split(
    train: usize,
    test: usize,
    shape: ImageShape,
    seed: u64,
) -> Result<DatasetHandle> {
    if train == 0 {
        return Err(Error::InvalidArgument {
            name: "n",
            reason: "need at least one image".into(),
        });
    }
    if shape.numel() == 0 {
        return Err(Error::InvalidArgument {
            name: "shape",
            reason: format!("{shape} has a zero dimension"),
        });
    }
    let generate = |count: usize, stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut data = Vec::with_capacity(count * shape.numel());
        for _ in 0..count {
            data.extend(synthetic_image(&mut rng, shape));
        }
        ImageSet::new(data, shape)
    };
    DatasetHandle::new("synthetic", generate(train, 1)?, generate(test, 2)?, seed)
}

/// A smooth low-frequency field per channel with a few flat-colored
/// rectangles and discs on top, quantized to 8 bits.
fn synthetic_image(rng: &mut ChaCha8Rng, shape: ImageShape) -> Vec<u8> {
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let mut field = vec![0.0f64; shape.numel()];
    let base: Vec<f64> = (0..c).map(|_| rng.random_range(0.25..0.75)).collect();
    let waves: Vec<(f64, f64, f64, Vec<f64>)> = (0..2)
        .map(|_| {
            let fy = rng.random_range(0..=2) as f64;
            let fx = rng.random_range(0..=2) as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = (0..c).map(|_| rng.random_range(-0.2..0.2)).collect();
            (fy, fx, phase, amp)
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut v = base[ch];
                for (fy, fx, phase, amp) in &waves {
                    let arg = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64);
                    v += amp[ch] * (arg + phase).cos();
                }
                field[(y * w + x) * c + ch] = v;
            }
        }
    }
    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let color: Vec<f64> = (0..c).map(|_| rng.random::<f64>()).collect();
        let disc = rng.random_bool(0.5);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = rng.random_range(1.0..(h as f64 / 3.0).max(1.5));
        let rx = rng.random_range(1.0..(w as f64 / 3.0).max(1.5));
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let inside = if disc {
                    (dy / ry).powi(2) + (dx / ry).powi(2) <= 1.0
                } else {
                    dy.abs() <= ry && dx.abs() <= rx
                };
                if inside {
                    for ch in 0..c {
                        field[(y * w + x) * c + ch] = color[ch];
                    }
                }
            }
        }
    }
    field
        .into_iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}
