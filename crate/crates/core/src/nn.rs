//! Small neural building blocks on top of candle, with seeded parameter
//! initialization and a named parameter store.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Module, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Every tensor in the crate is double precision on the CPU.
pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
    Const(f64),
}

/// Named trainable parameters, created lazily and deterministically from a seed.
///
/// A frozen store hands out detached tensors, so nothing built from it can
/// receive gradients.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    frozen: bool,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            frozen: false,
        }
    }

    /// Fetches `name`, creating it with `init` if absent.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(var) = self.vars.get(name) {
            if var.dims() != shape {
                return Err(Error::shape(
                    format!("{name}: {shape:?}"),
                    format!("{:?}", var.dims()),
                ));
            }
            return Ok(if self.frozen {
                var.as_tensor().detach()
            } else {
                var.as_tensor().clone()
            });
        }
        if self.frozen {
            return Err(Error::Incompatible(format!(
                "parameter `{name}` missing from frozen store"
            )));
        }
        let count: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; count],
            Init::Ones => vec![1.0; count],
            Init::Const(c) => vec![c; count],
            Init::Uniform(bound) => (0..count)
                .map(|_| self.rng.random_range(-bound..=bound))
                .collect(),
            Init::Normal(std) => (0..count)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
        };
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &device())?)?;
        let tensor = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(tensor)
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Parameters in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and values, in name order.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in var.as_tensor().flatten_all()?.to_vec1::<f64>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn save(&self, path: &Path, metadata: HashMap<String, String>) -> Result<()> {
        let mut buffers = Vec::with_capacity(self.vars.len());
        for (name, var) in &self.vars {
            let bytes: Vec<u8> = var
                .as_tensor()
                .flatten_all()?
                .to_vec1::<f64>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            buffers.push((name.clone(), var.dims().to_vec(), bytes));
        }
        let views = buffers
            .iter()
            .map(|(name, shape, bytes)| {
                safetensors::tensor::TensorView::new(
                    safetensors::Dtype::F64,
                    shape.clone(),
                    bytes,
                )
                .map(|view| (name.clone(), view))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        safetensors::serialize_to_file(views, Some(metadata), path)?;
        Ok(())
    }

    /// Loads parameters and the embedded string metadata.
    pub fn load(path: &Path, seed: u64) -> Result<(Self, HashMap<String, String>)> {
        let buffer = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(&buffer)?;
        let tensors = safetensors::SafeTensors::deserialize(&buffer)?;
        let mut store = Self::new(seed);
        for (name, view) in tensors.tensors() {
            if view.dtype() != safetensors::Dtype::F64 {
                return Err(Error::Corrupted {
                    what: path.display().to_string(),
                    reason: format!("tensor `{name}` is {:?}, expected F64", view.dtype()),
                });
            }
            let values: Vec<f64> = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::from_vec(values, view.shape(), &device())?;
            store.vars.insert(name, Var::from_tensor(&tensor)?);
        }
        Ok((store, meta.metadata().clone().unwrap_or_default()))
    }
}

pub(crate) fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine layer `y = x Wᵀ + b` over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    inner: candle_nn::Linear,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    /// Uniform fan-in initialization for weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::with_init(store, name, in_dim, out_dim, Init::Uniform(bound), Init::Zeros)
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        let w = store.get(&scoped(name, "weight"), &[out_dim, in_dim], weight)?;
        let b = store.get(&scoped(name, "bias"), &[out_dim], bias)?;
        Ok(Self {
            inner: candle_nn::Linear::new(w, Some(b)),
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.dim(D::Minus1)?;
        if last != self.in_dim {
            return Err(Error::shape(
                format!("last dim {}", self.in_dim),
                format!("last dim {last}"),
            ));
        }
        Ok(self.inner.forward(x)?)
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
}

/// Layer normalization over the last dimension, written with primitive ops so
/// that it is differentiable.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.get(&scoped(name, "gamma"), &[dim], Init::Ones)?,
            beta: store.get(&scoped(name, "beta"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Multi-head scaled dot-product self-attention over `(batch, tokens, dim)`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument {
                name: "heads",
                reason: format!("{heads} heads do not divide width {dim}"),
            });
        }
        Ok(Self {
            qkv: Linear::new(store, &scoped(name, "qkv"), dim, 3 * dim)?,
            proj: Linear::new(store, &scoped(name, "proj"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, d))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &scoped(name, "fc1"), dim, hidden)?,
            fc2: Linear::new(store, &scoped(name, "fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Pre-norm transformer block: attention then feed-forward, both residual.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    mlp: FeedForward,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &scoped(name, "norm1"), dim)?,
            attn: SelfAttention::new(store, &scoped(name, "attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &scoped(name, "norm2"), dim)?,
            mlp: FeedForward::new(store, &scoped(name, "mlp"), dim, dim * mlp_ratio)?,
        })
    }

    /// `x` is `(batch, tokens, dim)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let y = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + y)?)
    }

    /// Same block with attention restricted to non-overlapping square windows
    /// of a `(batch, rows, cols, dim)` grid, optionally cyclically shifted by
    /// half a window first.
    pub fn forward_windowed(&self, x: &Tensor, window: usize, shifted: bool) -> Result<Tensor> {
        let (b, rows, cols, d) = x.dims4()?;
        let shift = if shifted { window / 2 } else { 0 };
        let normed = self.norm1.forward(x)?;
        let rolled = if shift > 0 {
            normed.roll(-(shift as i32), 1)?.roll(-(shift as i32), 2)?
        } else {
            normed
        };
        let (wr, wc) = (rows / window, cols / window);
        let windows = rolled
            .reshape((b, wr, window, wc, window, d))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b * wr * wc, window * window, d))?;
        let attended = self
            .attn
            .forward(&windows)?
            .reshape((b, wr, wc, window, window, d))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, rows, cols, d))?;
        let attended = if shift > 0 {
            attended.roll(shift as i32, 1)?.roll(shift as i32, 2)?
        } else {
            attended
        };
        let x = (x + attended)?;
        let y = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + y)?)
    }
}

/// Squeeze-and-excitation over the feature (last) dimension of
/// `(batch, tokens, dim)`: mean-pool across tokens, bottleneck, sigmoid gates.
#[derive(Debug, Clone)]
pub struct SqueezeExcitation {
    reduce: Linear,
    expand: Linear,
}

impl SqueezeExcitation {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, reduction: usize) -> Result<Self> {
        let hidden = (dim / reduction.max(1)).max(1);
        Ok(Self {
            reduce: Linear::new(store, &scoped(name, "reduce"), dim, hidden)?,
            expand: Linear::new(store, &scoped(name, "expand"), hidden, dim)?,
        })
    }

    /// Per-sample channel gates, shape `(batch, 1, dim)`.
    pub fn gates(&self, x: &Tensor) -> Result<Tensor> {
        let squeezed = x.mean_keepdim(1)?;
        let hidden = self.reduce.forward(&squeezed)?.relu()?;
        Ok(candle_nn::ops::sigmoid(&self.expand.forward(&hidden)?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.gates(x)?)?)
    }
}

/// Conditioning network producing per-feature scale and shift from a small
/// side-information vector (SNR, fading magnitude).
#[derive(Debug, Clone)]
pub struct Modulation {
    fc1: Linear,
    fc2: Linear,
    dim: usize,
}

impl Modulation {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cond_dim: usize,
        hidden: usize,
        dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &scoped(name, "fc1"), cond_dim, hidden)?,
            // identity modulation at initialization
            fc2: Linear::with_init(store, &scoped(name, "fc2"), hidden, 2 * dim, Init::Zeros, Init::Zeros)?,
            dim,
        })
    }

    /// `x` is `(batch, tokens, dim)`, `cond` is `(batch, cond_dim)`.
    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(cond)?.gelu_erf()?;
        let film = self.fc2.forward(&h)?.unsqueeze(1)?;
        let scale = film.narrow(D::Minus1, 0, self.dim)?;
        let shift = film.narrow(D::Minus1, self.dim, self.dim)?;
        Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?)
    }
}

struct StraightThrough;

impl CustomOp2 for StraightThrough {
    fn name(&self) -> &'static str {
        "straight-through"
    }

    fn cpu_fwd(
        &self,
        _soft: &CpuStorage,
        _soft_layout: &Layout,
        hard: &CpuStorage,
        hard_layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = hard_layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("straight-through: non-contiguous input".into()))?;
        let out = match hard {
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].to_vec()),
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].to_vec()),
            _ => return Err(candle_core::Error::Msg("straight-through: unsupported dtype".into())),
        };
        Ok((out, hard_layout.shape().clone()))
    }

    fn bwd(
        &self,
        _soft: &Tensor,
        _hard: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        Ok((Some(grad_res.clone()), None))
    }
}

/// Forward value is exactly `hard`; the backward pass routes the incoming
/// gradient to `soft` unchanged.
pub fn straight_through(soft: &Tensor, hard: &Tensor) -> Result<Tensor> {
    if soft.dims() != hard.dims() {
        return Err(Error::shape(
            format!("{:?}", soft.dims()),
            format!("{:?}", hard.dims()),
        ));
    }
    let hard = hard.detach().contiguous()?;
    Ok(soft.apply_op2(&hard, StraightThrough)?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}
