//! The trainable binary interface: an array of binary symmetric channels whose
//! flip probabilities are learned together with the source codec and then
//! frozen as the contract handed to the channel codec.

use std::path::Path;

use candle_core::Tensor;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::bits::{BitProbabilities, BitSequence};
use crate::error::{Error, Result};
use crate::nn;

pub const SPEC_MAGIC: &[u8; 8] = b"IJSCCBSC";
pub const SPEC_FORMAT_VERSION: u32 = 1;

/// Frozen per-bit flip probabilities plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceSpec {
    epsilon: Vec<f64>,
    format_version: u32,
    training_fingerprint: String,
}

impl InterfaceSpec {
    pub fn new(epsilon: Vec<f64>, training_fingerprint: impl Into<String>) -> Result<Self> {
        let spec = Self {
            epsilon,
            format_version: SPEC_FORMAT_VERSION,
            training_fingerprint: training_fingerprint.into(),
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.epsilon.is_empty() {
            return Err(Error::Validation("interface must have at least one bit".into()));
        }
        if let Some((n, e)) = self
            .epsilon
            .iter()
            .enumerate()
            .find(|(_, e)| !(e.is_finite() && **e > 0.0 && **e <= 0.5))
        {
            return Err(Error::Validation(format!(
                "epsilon[{n}] = {e} outside (0, 0.5]"
            )));
        }
        if self.training_fingerprint.len() > u16::MAX as usize {
            return Err(Error::Validation("training fingerprint too long".into()));
        }
        Ok(())
    }

    pub fn epsilon(&self) -> &[f64] {
        &self.epsilon
    }

    pub fn bit_count(&self) -> usize {
        self.epsilon.len()
    }

    pub fn format_version(&self) -> u32 {
        self.format_version
    }

    pub fn training_fingerprint(&self) -> &str {
        &self.training_fingerprint
    }

    pub fn mean_epsilon(&self) -> f64 {
        self.epsilon.iter().sum::<f64>() / self.epsilon.len() as f64
    }

    /// `1 - 2ε` per position: 0 for a useless bit, approaching 1 for a clean one.
    pub fn importance_weights(&self) -> Vec<f64> {
        importance_weights(&self.epsilon)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body = self.checksummed_body();
        let digest = Sha256::digest(&body);
        let header_len = 8 + 4 + 8 + 2 + self.training_fingerprint.len();
        let mut out = Vec::with_capacity(body.len() + 8 + 32);
        out.extend_from_slice(SPEC_MAGIC);
        out.extend_from_slice(&body[..header_len - 8]);
        out.extend_from_slice(&digest);
        out.extend_from_slice(&body[header_len - 8..]);
        out
    }

    // version | M | fingerprint length | fingerprint | payload
    fn checksummed_body(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend_from_slice(&self.format_version.to_le_bytes());
        body.extend_from_slice(&(self.epsilon.len() as u64).to_le_bytes());
        body.extend_from_slice(&(self.training_fingerprint.len() as u16).to_le_bytes());
        body.extend_from_slice(self.training_fingerprint.as_bytes());
        for e in &self.epsilon {
            body.extend_from_slice(&e.to_le_bytes());
        }
        body
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupted = |reason: &str| Error::Corrupted {
            what: "interface spec".into(),
            reason: reason.into(),
        };
        let mut cursor = Cursor::new(bytes);
        if cursor.take(8).ok_or_else(|| corrupted("truncated header"))? != SPEC_MAGIC {
            return Err(corrupted("bad magic"));
        }
        let version = u32::from_le_bytes(
            cursor.array().ok_or_else(|| corrupted("truncated header"))?,
        );
        if version != SPEC_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: SPEC_FORMAT_VERSION,
            });
        }
        let count = u64::from_le_bytes(cursor.array().ok_or_else(|| corrupted("truncated header"))?);
        let fp_len =
            u16::from_le_bytes(cursor.array().ok_or_else(|| corrupted("truncated header"))?) as usize;
        let fingerprint = cursor.take(fp_len).ok_or_else(|| corrupted("truncated header"))?;
        let fingerprint =
            String::from_utf8(fingerprint.to_vec()).map_err(|_| corrupted("fingerprint not utf-8"))?;
        let stored: [u8; 32] = cursor.array().ok_or_else(|| corrupted("truncated checksum"))?;
        let payload_len = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| corrupted("bit count overflows"))?;
        let payload = cursor.take(payload_len).ok_or_else(|| corrupted("truncated payload"))?;
        if !cursor.is_empty() {
            return Err(corrupted("trailing bytes"));
        }
        let epsilon: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let spec = Self {
            epsilon,
            format_version: version,
            training_fingerprint: fingerprint,
        };
        if Sha256::digest(spec.checksummed_body()).as_slice() != stored {
            return Err(corrupted("checksum mismatch"));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_spec(spec: &InterfaceSpec, path: &Path) -> Result<()> {
    spec.save(path)
}

pub fn load_spec(path: &Path) -> Result<InterfaceSpec> {
    InterfaceSpec::load(path)
}

struct Cursor<'a> {
    rest: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { rest: bytes }
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.rest.len() < n {
            return None;
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Some(head)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().expect("exact length"))
    }

    fn is_empty(&self) -> bool {
        self.rest.is_empty()
    }
}

/// Unconstrained trainable parameters behind the flip probabilities,
/// mapped through `ε = 0.5 · sigmoid(raw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonParams {
    pub raw: Vec<f64>,
}

impl EpsilonParams {
    /// All positions start at the given flip probability.
    pub fn constant(bit_count: usize, epsilon: f64) -> Result<Self> {
        Ok(Self {
            raw: vec![raw_from_epsilon(epsilon)?; bit_count],
        })
    }

    pub fn epsilon(&self) -> Vec<f64> {
        epsilon_from_raw(&self.raw)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn epsilon_from_raw(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|&r| 0.5 * sigmoid(r)).collect()
}

/// Inverse of the sigmoid-half mapping, defined on `(0, 0.5)`.
pub fn raw_from_epsilon(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::InvalidArgument {
            name: "epsilon",
            reason: format!("{epsilon} outside (0, 0.5)"),
        });
    }
    let s = 2.0 * epsilon;
    Ok((s / (1.0 - s)).ln())
}

/// Transition law of one BSC: `ε` if the output bit differs from the input, else `1 - ε`.
pub fn bsc_transition_prob(b: bool, b_hat: bool, eps: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::InvalidArgument {
            name: "eps",
            reason: format!("{eps} outside [0, 1]"),
        });
    }
    Ok(if b != b_hat { eps } else { 1.0 - eps })
}

/// Probability that the BSC output is 1 when the input is Bernoulli(p).
pub fn noisy_bit_marginal(p: &BitProbabilities, eps: &[f64]) -> Result<BitProbabilities> {
    if p.len() != eps.len() {
        return Err(Error::shape(format!("{} flip probabilities", p.len()), eps.len()));
    }
    if let Some(e) = eps.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(Error::InvalidArgument {
            name: "eps",
            reason: format!("{e} outside [0, 1]"),
        });
    }
    let q = p
        .as_slice()
        .iter()
        .zip(eps)
        .map(|(&p, &e)| p * (1.0 - e) + (1.0 - p) * e)
        .collect();
    BitProbabilities::new(q)
}

/// Independent Bernoulli draws, bit `n` set iff `u_n < q_n` for `u_n ~ U[0, 1)`.
pub fn sample_noisy_bits<R: Rng + ?Sized>(q: &BitProbabilities, rng: &mut R) -> BitSequence {
    q.as_slice()
        .iter()
        .map(|&qn| rng.random::<f64>() < qn)
        .collect()
}

/// `(λ / M) Σ (ε_n - 0.5)²`.
pub fn regularization_loss(eps: &[f64], lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if eps.is_empty() {
        return Err(Error::InvalidArgument {
            name: "eps",
            reason: "empty".into(),
        });
    }
    let sum: f64 = eps.iter().map(|e| (e - 0.5) * (e - 0.5)).sum();
    Ok(lambda * sum / eps.len() as f64)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidArgument {
            name: "lambda",
            reason: format!("{lambda} must be a nonnegative real"),
        });
    }
    Ok(())
}

pub fn importance_weights(eps: &[f64]) -> Vec<f64> {
    eps.iter().map(|e| 1.0 - 2.0 * e).collect()
}

/// Differentiable counterparts of the scalar operations above, over batched
/// tensors: probabilities are `(batch, M)`, flip probabilities `(M,)`.
pub mod ops {
    use super::*;

    pub fn epsilon(raw: &Tensor) -> Result<Tensor> {
        Ok((candle_nn::ops::sigmoid(raw)? * 0.5)?)
    }

    pub fn noisy_marginal(p: &Tensor, eps: &Tensor) -> Result<Tensor> {
        let slope = eps.affine(-2.0, 1.0)?;
        Ok(p.broadcast_mul(&slope)?.broadcast_add(eps)?)
    }

    /// Hard Bernoulli draws in the forward pass, identity gradient to `q`.
    pub fn sample_straight_through<R: Rng + ?Sized>(q: &Tensor, rng: &mut R) -> Result<Tensor> {
        let values = q.flatten_all()?.to_vec1::<f64>()?;
        let hard: Vec<f64> = values
            .iter()
            .map(|&qn| if rng.random::<f64>() < qn { 1.0 } else { 0.0 })
            .collect();
        let hard = Tensor::from_vec(hard, q.dims(), &nn::device())?;
        nn::straight_through(q, &hard)
    }

    pub fn regularization(eps: &Tensor, lambda: f64) -> Result<Tensor> {
        check_lambda(lambda)?;
        Ok((eps.affine(1.0, -0.5)?.sqr()?.mean_all()? * lambda)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probs(v: &[f64]) -> BitProbabilities {
        BitProbabilities::new(v.to_vec()).unwrap()
    }

    #[test]
    fn epsilon_mapping_examples() {
        assert_eq!(epsilon_from_raw(&[0.0]), vec![0.25]);
        assert!(epsilon_from_raw(&[-800.0])[0] < 1e-300);
        assert_eq!(epsilon_from_raw(&[800.0]), vec![0.5]);
        let p = EpsilonParams::constant(3, 0.25).unwrap();
        assert_eq!(p.raw, vec![0.0; 3]);
        let back = epsilon_from_raw(&[raw_from_epsilon(0.1).unwrap()])[0];
        assert!((back - 0.1).abs() < 1e-15);
    }

    #[test]
    fn transition_examples() {
        assert_eq!(bsc_transition_prob(true, false, 0.1).unwrap(), 0.1);
        assert_eq!(bsc_transition_prob(false, false, 0.0).unwrap(), 1.0);
        assert_eq!(bsc_transition_prob(true, true, 0.5).unwrap(), 0.5);
        assert!(bsc_transition_prob(true, true, 1.5).is_err());
        assert!(bsc_transition_prob(true, true, -0.1).is_err());
    }

    #[test]
    fn marginal_examples() {
        let q = noisy_bit_marginal(&probs(&[1.0, 0.5, 0.8]), &[0.1, 0.37, 0.25]).unwrap();
        let v = q.as_slice();
        assert!((v[0] - 0.9).abs() < 1e-15);
        assert!((v[1] - 0.5).abs() < 1e-15);
        assert!((v[2] - (0.8 * 0.75 + 0.2 * 0.25)).abs() < 1e-15);
        assert!((v[2] - 0.65).abs() < 1e-12);
        assert!(noisy_bit_marginal(&probs(&[0.1]), &[0.1, 0.2]).is_err());
    }

    #[test]
    fn degenerate_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert!(sample_noisy_bits(&probs(&[0.0; 16]), &mut rng)
                .as_slice()
                .iter()
                .all(|b| !b));
            assert!(sample_noisy_bits(&probs(&[1.0; 16]), &mut rng)
                .as_slice()
                .iter()
                .all(|b| *b));
        }
    }

    #[test]
    fn sampling_rate_within_binomial_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let q = probs(&[0.3]);
        let ones = (0..n)
            .filter(|_| sample_noisy_bits(&q, &mut rng).as_slice()[0])
            .count();
        let mean = ones as f64 / n as f64;
        assert!((mean - 0.3).abs() < 3.0 * (0.3f64 * 0.7 / n as f64).sqrt());
    }

    #[test]
    fn regularization_examples() {
        assert_eq!(regularization_loss(&[0.5; 4], 1.0).unwrap(), 0.0);
        assert_eq!(regularization_loss(&[0.0; 4], 1.0).unwrap(), 0.25);
        assert!((regularization_loss(&[0.1, 0.4], 2.0).unwrap() - 0.17).abs() < 1e-15);
        assert!(regularization_loss(&[0.1], -1.0).is_err());
        assert!(regularization_loss(&[], 1.0).is_err());
    }

    #[test]
    fn importance_examples() {
        assert_eq!(importance_weights(&[0.5, 0.0]), vec![0.0, 1.0]);
        let w = importance_weights(&[0.1, 0.3]);
        assert!((w[0] - 0.8).abs() < 1e-15 && (w[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn spec_validation() {
        assert!(InterfaceSpec::new(vec![], "x").is_err());
        assert!(InterfaceSpec::new(vec![0.0], "x").is_err());
        assert!(InterfaceSpec::new(vec![0.6], "x").is_err());
        assert!(InterfaceSpec::new(vec![0.5, 1e-9], "x").is_ok());
    }

    #[test]
    fn spec_file_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.bin");
        assert!(matches!(load_spec(&missing), Err(Error::NotFound(_))));

        let spec = InterfaceSpec::new(vec![0.1, 0.2, 0.3], "run-1").unwrap();
        let bytes = spec.to_bytes();
        let path = dir.path().join("spec.bin");

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_spec(&path), Err(Error::Corrupted { .. })));

        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(load_spec(&path), Err(Error::Corrupted { .. })));

        let mut versioned = bytes.clone();
        versioned[8..12].copy_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, &versioned).unwrap();
        assert!(matches!(
            load_spec(&path),
            Err(Error::VersionMismatch { found: 7, .. })
        ));

        // well-formed container holding zero bits
        let empty = InterfaceSpec {
            epsilon: vec![],
            format_version: SPEC_FORMAT_VERSION,
            training_fingerprint: "x".into(),
        };
        std::fs::write(&path, empty.to_bytes()).unwrap();
        assert!(matches!(load_spec(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn tensor_ops_match_scalar_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw: Vec<f64> = (0..7).map(|_| rng.random_range(-4.0..4.0)).collect();
        let p: Vec<f64> = (0..14).map(|_| rng.random()).collect();
        let raw_t = Tensor::from_vec(raw.clone(), 7, &nn::device()).unwrap();
        let eps_t = ops::epsilon(&raw_t).unwrap();
        let eps = eps_t.to_vec1::<f64>().unwrap();
        for (a, b) in eps.iter().zip(epsilon_from_raw(&raw)) {
            assert!((a - b).abs() < 1e-15);
        }
        let p_t = Tensor::from_vec(p.clone(), (2, 7), &nn::device()).unwrap();
        let q = ops::noisy_marginal(&p_t, &eps_t).unwrap().to_vec2::<f64>().unwrap();
        for row in 0..2 {
            let expected = noisy_bit_marginal(&probs(&p[row * 7..(row + 1) * 7]), &eps).unwrap();
            for (a, b) in q[row].iter().zip(expected.as_slice()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        let reg = ops::regularization(&eps_t, 1.5).unwrap().to_scalar::<f64>().unwrap();
        assert!((reg - regularization_loss(&eps, 1.5).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn straight_through_sampler_degenerate_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Var::from_tensor(&Tensor::new(&[0.0f64, 1.0, 0.0, 1.0], &nn::device()).unwrap()).unwrap();
        let s = ops::sample_straight_through(q.as_tensor(), &mut rng).unwrap();
        assert_eq!(s.to_vec1::<f64>().unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        let g = s.sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(&q).unwrap().to_vec1::<f64>().unwrap(), vec![1.0; 4]);
    }

    proptest! {
        #[test]
        fn transition_sums_to_one(b: bool, eps in 0.0f64..=1.0) {
            let total = bsc_transition_prob(b, false, eps).unwrap()
                + bsc_transition_prob(b, true, eps).unwrap();
            prop_assert!((total - 1.0).abs() < 1e-15);
        }

        #[test]
        fn marginal_is_affine_in_p(p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0, eps in 0.0f64..=1.0) {
            let q1 = noisy_bit_marginal(&probs(&[p1]), &[eps]).unwrap().as_slice()[0];
            let q2 = noisy_bit_marginal(&probs(&[p2]), &[eps]).unwrap().as_slice()[0];
            prop_assert!(((q1 - q2) - (1.0 - 2.0 * eps) * (p1 - p2)).abs() < 1e-12);
        }

        #[test]
        fn importance_decreasing_in_raw(a in -30.0f64..30.0, delta in 1e-3f64..10.0) {
            let w = importance_weights(&epsilon_from_raw(&[a, a + delta]));
            prop_assert!(w[0] > w[1]);
            prop_assert!(w.iter().all(|v| (0.0..1.0).contains(v)));
        }

        #[test]
        fn spec_round_trip_is_bit_exact(
            eps in proptest::collection::vec(1e-12f64..=0.5, 1..64),
            fp in "[a-z0-9]{0,40}",
        ) {
            let spec = InterfaceSpec::new(eps, fp).unwrap();
            let back = InterfaceSpec::from_bytes(&spec.to_bytes()).unwrap();
            prop_assert_eq!(back.epsilon().len(), spec.epsilon().len());
            for (a, b) in back.epsilon().iter().zip(spec.epsilon()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back, spec);
        }
    }
}
