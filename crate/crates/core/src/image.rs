//! Raster images, class labels and probability vectors.

use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Tolerance on the sum of a [`ProbabilityVector`].
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// RGB image with intensities normalized to `[0, 1]`, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::contract(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height * CHANNELS {
            return Err(Error::contract(format!(
                "image data length {} does not match {width}x{height}x{CHANNELS}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * CHANNELS).collect();
        Self::new(width, height, data)
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Pixel by flat row-major index.
    pub fn pixel_at(&self, index: usize) -> [f64; 3] {
        let i = index * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub(crate) fn set_pixel_at(&mut self, index: usize, rgb: [f64; 3]) {
        let i = index * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let bytes = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length checked at construction")
    }

    pub fn from_rgb8(img: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect(),
        }
    }

    /// Encodes the image as an 8-bit RGB PNG.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::contract(format!("png encode failed: {e}")))?;
        Ok(out.into_inner())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Decode {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }
}

/// Loads a PNG, JPEG or BMP file; 8-bit value `v` becomes `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = image::guess_format(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg | ImageFormat::Bmp) {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: format!("unsupported format {format:?}"),
        });
    }
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(RasterImage::from_rgb8(&img.to_rgb8()))
}

/// Writes the image as PNG, atomically.
pub fn save_png(image: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path, &image.encode_png()?)
}

/// A class label of the two-class glaucoma task.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassLabel {
    pub value: u8,
    pub name: String,
}

impl ClassLabel {
    pub const NON_GLAUCOMA: u8 = 0;
    pub const GLAUCOMA: u8 = 1;

    pub fn new(value: u8, name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if value > 1 {
            return Err(Error::contract(format!("class label {value} not in {{0, 1}}")));
        }
        if name.is_empty() {
            return Err(Error::contract("class display name is empty"));
        }
        Ok(Self { value, name })
    }

    pub fn non_glaucoma() -> Self {
        Self {
            value: Self::NON_GLAUCOMA,
            name: "non-glaucoma".into(),
        }
    }

    pub fn glaucoma() -> Self {
        Self {
            value: Self::GLAUCOMA,
            name: "glaucoma".into(),
        }
    }

    /// Default label for a class index.
    pub fn from_index(value: u8) -> Result<Self> {
        match value {
            0 => Ok(Self::non_glaucoma()),
            1 => Ok(Self::glaucoma()),
            v => Err(Error::contract(format!("class label {v} not in {{0, 1}}"))),
        }
    }
}

/// Per-class probabilities summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(probs, PROB_SUM_TOLERANCE)
    }

    /// Validates with a looser sum tolerance and renormalizes what passes.
    pub fn normalized(probs: Vec<f64>, tolerance: f64) -> Result<Self> {
        let checked = Self::with_tolerance(probs, tolerance)?;
        let sum: f64 = checked.0.iter().sum();
        Ok(Self(checked.0.into_iter().map(|p| p / sum).collect()))
    }

    fn with_tolerance(probs: Vec<f64>, tolerance: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Validation("empty probability vector".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::Validation(format!("entry {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > tolerance {
            return Err(Error::Validation(format!("probabilities sum to {sum}, expected 1")));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<f64> {
        self.0.get(class).copied()
    }

    /// Index of the largest probability; ties go to the lower class id.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for ProbabilityVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbabilityVector> for Vec<f64> {
    fn from(p: ProbabilityVector) -> Self {
        p.0
    }
}
