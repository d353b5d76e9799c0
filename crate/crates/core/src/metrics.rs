//! Reconstruction and bit-level quality metrics.

use candle_core::Tensor;

use crate::bits::BitSequence;
use crate::error::{Error, Result};
use crate::image::Image;

/// Reported PSNR for a zero-error reconstruction.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Mean per-element squared error.
pub fn mean_squared_error(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument {
            name: "a",
            reason: "empty".into(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(max² / mse)` over per-element mean squared error, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &[f64], b: &[f64], max_value: f64) -> Result<f64> {
    if !(max_value > 0.0) {
        return Err(Error::InvalidArgument {
            name: "max_value",
            reason: format!("{max_value} must be positive"),
        });
    }
    let mse = mean_squared_error(a, b)?;
    Ok(psnr_from_mse(mse, max_value))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max_value * max_value / mse).log10()).min(PSNR_CAP_DB)
}

/// PSNR in the images' original integer domain (MAX = 255 for 8-bit sources).
pub fn psnr_images(s: &Image, s_hat: &Image) -> Result<f64> {
    if s.shape() != s_hat.shape() {
        return Err(Error::shape(s.shape(), s_hat.shape()));
    }
    psnr(&s.to_source_domain(), &s_hat.to_source_domain(), s.source_max())
}

/// Per-image PSNR for `(batch, …)` tensors holding `[0, 1]` values of 8-bit sources.
pub fn batch_psnr(s: &Tensor, s_hat: &Tensor) -> Result<Vec<f64>> {
    if s.dims() != s_hat.dims() {
        return Err(Error::shape(format!("{:?}", s.dims()), format!("{:?}", s_hat.dims())));
    }
    let b = s.dim(0)?;
    let a = s.reshape((b, ()))?.to_vec2::<f64>()?;
    let c = s_hat.reshape((b, ()))?.to_vec2::<f64>()?;
    a.iter()
        .zip(&c)
        .map(|(x, y)| {
            let x: Vec<f64> = x.iter().map(|v| v * 255.0).collect();
            let y: Vec<f64> = y.iter().map(|v| v.clamp(0.0, 1.0) * 255.0).collect();
            psnr(&x, &y, 255.0)
        })
        .collect()
}

/// Fraction of positions where the sequences differ.
pub fn bit_error_rate(b: &BitSequence, b_hat: &BitSequence) -> Result<f64> {
    if b.len() != b_hat.len() {
        return Err(Error::shape(b.len(), b_hat.len()));
    }
    if b.is_empty() {
        return Ok(0.0);
    }
    let errors = b
        .as_slice()
        .iter()
        .zip(b_hat.as_slice())
        .filter(|(x, y)| x != y)
        .count();
    Ok(errors as f64 / b.len() as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}
