//! Physical-layer simulation: power normalization, AWGN and flat Rayleigh
//! fading with receiver-side channel knowledge, SNR and bandwidth arithmetic.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        })
    }
}

impl FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "awgn" => Ok(ChannelKind::Awgn),
            "rayleigh" => Ok(ChannelKind::Rayleigh),
            other => Err(Error::InvalidArgument {
                name: "channel",
                reason: format!("unknown channel `{other}` (expected awgn or rayleigh)"),
            }),
        }
    }
}

/// Complex channel-input symbols with their mean power `mean |x|²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSymbols {
    symbols: Vec<Complex64>,
    power: f64,
}

impl ChannelSymbols {
    pub fn symbols(&self) -> &[Complex64] {
        &self.symbols
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Interleaved `[re0, im0, re1, im1, …]`.
    pub fn to_reals(&self) -> Vec<f64> {
        reals_from_complex(&self.symbols)
    }
}

/// Realized channel for one block: fading coefficient, noise variance per
/// complex symbol, and the nominal SNR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelState {
    pub h: Complex64,
    pub noise_sigma2: f64,
    pub snr_db: f64,
}

pub fn mean_power(x: &[Complex64]) -> f64 {
    x.iter().map(|s| s.norm_sqr()).sum::<f64>() / x.len() as f64
}

/// Scales `x` by `sqrt(L / Σ|x|²)` so that the mean symbol power is 1.
pub fn power_normalize(x: &[Complex64]) -> Result<ChannelSymbols> {
    if x.is_empty() {
        return Err(Error::InvalidArgument {
            name: "x",
            reason: "no symbols".into(),
        });
    }
    let energy: f64 = x.iter().map(|s| s.norm_sqr()).sum();
    if !(energy > 0.0 && energy.is_finite()) {
        return Err(Error::InvalidArgument {
            name: "x",
            reason: "cannot normalize an all-zero or non-finite block".into(),
        });
    }
    let scale = (x.len() as f64 / energy).sqrt();
    let symbols: Vec<Complex64> = x.iter().map(|s| s * scale).collect();
    let power = mean_power(&symbols);
    Ok(ChannelSymbols { symbols, power })
}

/// Noise variance per complex symbol at unit signal power.
pub fn snr_to_sigma2(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// One sample of `CN(0, sigma2)`: independent real and imaginary parts of
/// variance `sigma2 / 2` each.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, sigma2: f64) -> Complex64 {
    let std = (sigma2 / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * std, im * std)
}

/// `y = h · x + n` for a given realized state.
pub fn transmit_with_state<R: Rng + ?Sized>(
    x: &ChannelSymbols,
    state: &ChannelState,
    rng: &mut R,
) -> Vec<Complex64> {
    x.symbols
        .iter()
        .map(|s| state.h * s + complex_gaussian(rng, state.noise_sigma2))
        .collect()
}

pub fn transmit_awgn<R: Rng + ?Sized>(
    x: &ChannelSymbols,
    snr_db: f64,
    rng: &mut R,
) -> (Vec<Complex64>, ChannelState) {
    let state = ChannelState {
        h: Complex64::new(1.0, 0.0),
        noise_sigma2: snr_to_sigma2(snr_db),
        snr_db,
    };
    (transmit_with_state(x, &state, rng), state)
}

/// Flat, quasi-static fading: one `h ~ CN(0, 1)` for the whole block.
pub fn transmit_rayleigh<R: Rng + ?Sized>(
    x: &ChannelSymbols,
    snr_db: f64,
    rng: &mut R,
) -> (Vec<Complex64>, ChannelState) {
    let state = ChannelState {
        h: complex_gaussian(rng, 1.0),
        noise_sigma2: snr_to_sigma2(snr_db),
        snr_db,
    };
    (transmit_with_state(x, &state, rng), state)
}

pub fn transmit<R: Rng + ?Sized>(
    kind: ChannelKind,
    x: &ChannelSymbols,
    snr_db: f64,
    rng: &mut R,
) -> (Vec<Complex64>, ChannelState) {
    match kind {
        ChannelKind::Awgn => transmit_awgn(x, snr_db, rng),
        ChannelKind::Rayleigh => transmit_rayleigh(x, snr_db, rng),
    }
}

/// Zero-forcing with the known coefficient: `y / h`.
pub fn equalize(y: &[Complex64], state: &ChannelState) -> Vec<Complex64> {
    y.iter().map(|v| v / state.h).collect()
}

/// Channel bandwidth ratio `L / (C · H · W)`.
pub fn cbr(symbols: usize, height: usize, width: usize, channels: usize) -> Result<f64> {
    let dims = height * width * channels;
    if dims == 0 {
        return Err(Error::InvalidArgument {
            name: "shape",
            reason: "image dimensions must be positive".into(),
        });
    }
    Ok(symbols as f64 / dims as f64)
}

pub fn reals_from_complex(x: &[Complex64]) -> Vec<f64> {
    x.iter().flat_map(|s| [s.re, s.im]).collect()
}

pub fn complex_from_reals(x: &[f64]) -> Result<Vec<Complex64>> {
    if x.len() % 2 != 0 {
        return Err(Error::shape("an even number of reals", x.len()));
    }
    Ok(x.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect())
}
