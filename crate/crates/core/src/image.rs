use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// An `H × W × C` image in row-major HWC order, values inside `value_range`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Vec<f64>,
    shape: ImageShape,
    value_range: (f64, f64),
    source_depth: u8,
}

impl Image {
    /// A `[0, 1]` image derived from 8-bit samples.
    pub fn new(pixels: Vec<f64>, shape: ImageShape) -> Result<Self> {
        Self::with_range(pixels, shape, (0.0, 1.0), 8)
    }

    pub fn with_range(
        pixels: Vec<f64>,
        shape: ImageShape,
        value_range: (f64, f64),
        source_depth: u8,
    ) -> Result<Self> {
        if shape.numel() == 0 {
            return Err(Error::InvalidArgument {
                name: "shape",
                reason: format!("{shape} has a zero dimension"),
            });
        }
        if pixels.len() != shape.numel() {
            return Err(Error::shape(shape.numel(), pixels.len()));
        }
        let (lo, hi) = value_range;
        if let Some(v) = pixels.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(Error::Validation(format!(
                "pixel value {v} outside [{lo}, {hi}]"
            )));
        }
        Ok(Self {
            pixels,
            shape,
            value_range,
            source_depth,
        })
    }

    pub fn from_u8(bytes: &[u8], shape: ImageShape) -> Result<Self> {
        Self::new(bytes.iter().map(|&b| b as f64 / 255.0).collect(), shape)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn value_range(&self) -> (f64, f64) {
        self.value_range
    }

    pub fn source_depth(&self) -> u8 {
        self.source_depth
    }

    /// Largest representable sample in the original integer domain.
    pub fn source_max(&self) -> f64 {
        ((1u32 << self.source_depth) - 1) as f64
    }

    /// Values mapped back to the original `0 ..= 2^depth - 1` domain.
    pub fn to_source_domain(&self) -> Vec<f64> {
        let (lo, hi) = self.value_range;
        let max = self.source_max();
        self.pixels
            .iter()
            .map(|v| (v - lo) / (hi - lo) * max)
            .collect()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.pixels.clone(),
            (1, self.shape.height, self.shape.width, self.shape.channels),
            &nn::device(),
        )?)
    }
}

/// Stacks images into a `(batch, H, W, C)` tensor.
pub fn stack(images: &[Image]) -> Result<Tensor> {
    let shape = images
        .first()
        .ok_or_else(|| Error::InvalidArgument {
            name: "images",
            reason: "empty batch".into(),
        })?
        .shape;
    let mut data = Vec::with_capacity(images.len() * shape.numel());
    for img in images {
        if img.shape != shape {
            return Err(Error::shape(shape, img.shape));
        }
        data.extend_from_slice(&img.pixels);
    }
    Ok(Tensor::from_vec(
        data,
        (images.len(), shape.height, shape.width, shape.channels),
        &nn::device(),
    )?)
}

/// Splits a `(batch, H, W, C)` tensor back into images, clamping into `[0, 1]`.
pub fn unstack(t: &Tensor) -> Result<Vec<Image>> {
    let (b, h, w, c) = t.dims4()?;
    let shape = ImageShape::new(h, w, c);
    let flat = t.flatten_all()?.to_vec1::<f64>()?;
    flat.chunks_exact(shape.numel())
        .take(b)
        .map(|chunk| Image::new(chunk.iter().map(|v| v.clamp(0.0, 1.0)).collect(), shape))
        .collect()
}
