//! Hard bit sequences and their soft Bernoulli parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-position probability that a bit equals 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitProbabilities(Vec<f64>);

impl BitProbabilities {
    /// Builds from raw values, clamping into `[0, 1]`. Non-finite values are rejected.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if let Some(i) = probs.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument {
                name: "probs",
                reason: format!("non-finite probability at position {i}"),
            });
        }
        Ok(Self(probs.into_iter().map(|p| p.clamp(0.0, 1.0)).collect()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A hard bit sequence in `{0, 1}^M`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitSequence(Vec<bool>);

impl BitSequence {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    /// Interprets each value as a bit; anything other than 0 or 1 is rejected.
    pub fn from_reals(values: &[f64]) -> Result<Self> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v == 0.0 {
                    Ok(false)
                } else if v == 1.0 {
                    Ok(true)
                } else {
                    Err(Error::InvalidArgument {
                        name: "bits",
                        reason: format!("value {v} at position {i} is not binary"),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn get(&self, n: usize) -> Option<bool> {
        self.0.get(n).copied()
    }

    pub fn flip(&mut self, n: usize) {
        self.0[n] = !self.0[n];
    }

    pub fn to_reals(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

impl FromIterator<bool> for BitSequence {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Element-wise rounding of Bernoulli parameters: the mode of the factorized
/// distribution. A tie at exactly 0.5 rounds to 1.
pub fn binarize(p: &BitProbabilities) -> BitSequence {
    p.as_slice().iter().map(|&v| v >= 0.5).collect()
}

/// Same rule as [`binarize`] on a flat slice of reals, producing 0.0 / 1.0.
pub(crate) fn round_half_up(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
        .collect()
}
