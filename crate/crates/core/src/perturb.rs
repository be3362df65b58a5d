//! Perturbed samples around one image and their locality weights.
//!
//! Masks are drawn from ChaCha8 seeded with `seed_from_u64(seed)`. Row 0 is always the
//! all-ones mask (the original image). For rows `1..n`, bit `j` of row `i` is the top bit
//! of the next `u64` output, drawn in row-major order, which is a fair Bernoulli(0.5) draw.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::ModelAdapter;
use crate::error::{Error, Result};
use crate::image::{ProbabilityVector, RasterImage};
use crate::segmentation::SegmentMap;

pub const DEFAULT_SAMPLES: usize = 1000;
pub const DEFAULT_KERNEL_WIDTH: f64 = 0.25;

/// Samples sent to the model per call when building a batch.
const QUERY_CHUNK: usize = 32;

/// Which segments are kept (1) or replaced (0).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct MaskVector(Vec<bool>);

impl MaskVector {
    pub fn ones(d: usize) -> Self {
        Self(vec![true; d])
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![false; d])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn get(&self, segment: usize) -> bool {
        self.0[segment]
    }

    pub fn set(&mut self, segment: usize, present: bool) {
        self.0[segment] = present;
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }
}

impl TryFrom<Vec<u8>> for MaskVector {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        v.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::contract(format!("mask bit {other} is not 0 or 1"))),
            })
            .collect::<Result<_>>()
            .map(Self)
    }
}

impl From<MaskVector> for Vec<u8> {
    fn from(m: MaskVector) -> Self {
        m.0.into_iter().map(u8::from).collect()
    }
}

/// How pixels of removed segments are filled.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum FusionPolicy {
    #[default]
    SegmentMean,
    FixedColor {
        color: [f64; 3],
    },
}

impl FusionPolicy {
    pub fn fixed(color: [f64; 3]) -> Result<Self> {
        if color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::contract(format!("fixed color {color:?} outside [0, 1]")));
        }
        Ok(Self::FixedColor { color })
    }
}

pub fn sample_masks(d: usize, n: usize, seed: u64) -> Result<Vec<MaskVector>> {
    if d == 0 {
        return Err(Error::contract("cannot sample masks over zero segments"));
    }
    if n < 2 {
        return Err(Error::contract(format!(
            "need at least 2 samples (original plus one perturbation), got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Vec::with_capacity(n);
    masks.push(MaskVector::ones(d));
    for _ in 1..n {
        let bits = (0..d).map(|_| rng.next_u64() >> 63 == 1).collect();
        masks.push(MaskVector(bits));
    }
    Ok(masks)
}

/// Mean color of every segment of `image`.
pub fn segment_means(image: &RasterImage, map: &SegmentMap) -> Result<Vec<[f64; 3]>> {
    map.check_image(image)?;
    let mut sums = vec![[0.0f64; 4]; map.segment_count()];
    for (i, &l) in map.labels().iter().enumerate() {
        let p = image.pixel_at(i);
        let s = &mut sums[l as usize];
        s[0] += p[0];
        s[1] += p[1];
        s[2] += p[2];
        s[3] += 1.0;
    }
    Ok(sums
        .into_iter()
        .map(|s| [s[0] / s[3], s[1] / s[3], s[2] / s[3]])
        .collect())
}

pub fn apply_mask(
    image: &RasterImage,
    map: &SegmentMap,
    mask: &MaskVector,
    policy: FusionPolicy,
) -> Result<RasterImage> {
    let fill = fill_colors(image, map, policy)?;
    apply_with_fill(image, map, mask, &fill)
}

fn fill_colors(image: &RasterImage, map: &SegmentMap, policy: FusionPolicy) -> Result<Vec<[f64; 3]>> {
    match policy {
        FusionPolicy::SegmentMean => segment_means(image, map),
        FusionPolicy::FixedColor { color } => {
            map.check_image(image)?;
            Ok(vec![color; map.segment_count()])
        }
    }
}

fn apply_with_fill(image: &RasterImage, map: &SegmentMap, mask: &MaskVector, fill: &[[f64; 3]]) -> Result<RasterImage> {
    map.check_image(image)?;
    if mask.len() != map.segment_count() {
        return Err(Error::contract(format!(
            "mask has {} bits but the map has {} segments",
            mask.len(),
            map.segment_count()
        )));
    }
    let mut out = image.clone();
    for (i, &l) in map.labels().iter().enumerate() {
        if !mask.get(l as usize) {
            out.set_pixel_at(i, fill[l as usize]);
        }
    }
    Ok(out)
}

/// Cosine distance `1 - a.b / (|a| |b|)`; an all-zero vector is at distance 1 from anything.
pub fn mask_distance(a: &MaskVector, b: &MaskVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "mask lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.count_ones(), b.count_ones());
    if na == 0 || nb == 0 {
        return Ok(1.0);
    }
    let dot = a.0.iter().zip(&b.0).filter(|(x, y)| **x && **y).count();
    let cos = dot as f64 / ((na as f64).sqrt() * (nb as f64).sqrt());
    Ok((1.0 - cos).clamp(0.0, 1.0))
}

/// Exponential locality kernel `exp(-distance^2 / sigma^2)`.
pub fn kernel_weight(distance: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::contract(format!("kernel width must be positive, got {sigma}")));
    }
    if !(distance >= 0.0) {
        return Err(Error::contract(format!(
            "distance must be non-negative, got {distance}"
        )));
    }
    Ok((-(distance * distance) / (sigma * sigma)).exp())
}

/// Masks, locality weights and model outputs for one explained image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBatch {
    pub masks: Vec<MaskVector>,
    pub weights: Vec<f64>,
    pub predictions: Vec<ProbabilityVector>,
    pub seed: u64,
    #[serde(rename = "sigma")]
    pub kernel_width: f64,
}

impl PerturbationBatch {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn segment_count(&self) -> usize {
        self.masks.first().map_or(0, MaskVector::len)
    }

    /// Checks the structural invariants (shared length, original first, weight 1 first).
    pub fn validate(&self) -> Result<()> {
        let n = self.masks.len();
        if n < 2 || self.weights.len() != n || self.predictions.len() != n {
            return Err(Error::contract(format!(
                "batch arrays must share a length of at least 2 (masks {n}, weights {}, predictions {})",
                self.weights.len(),
                self.predictions.len()
            )));
        }
        let d = self.segment_count();
        if self.masks[0] != MaskVector::ones(d) {
            return Err(Error::contract("first mask must be the unperturbed image"));
        }
        if self.masks.iter().any(|m| m.len() != d) {
            return Err(Error::contract("masks differ in length"));
        }
        if self.weights[0] != 1.0 || self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::contract("weights must be non-negative with weights[0] = 1"));
        }
        Ok(())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let b: Self = crate::io::read_json(path)?;
        b.validate()?;
        Ok(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchConfig {
    pub samples: usize,
    pub seed: u64,
    pub kernel_width: f64,
    pub policy: FusionPolicy,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            seed: 0,
            kernel_width: DEFAULT_KERNEL_WIDTH,
            policy: FusionPolicy::SegmentMean,
        }
    }
}

/// Samples masks, renders each masked image and queries the model.
///
/// Masks are generated sequentially; model queries run on the rayon pool in chunks and are
/// written back by index, so the result does not depend on the thread count.
pub fn build_batch(
    image: &RasterImage,
    map: &SegmentMap,
    config: &BatchConfig,
    model: &dyn ModelAdapter,
) -> Result<PerturbationBatch> {
    map.check_image(image)?;
    let d = map.segment_count();
    let masks = sample_masks(d, config.samples, config.seed)?;
    let ones = MaskVector::ones(d);
    let weights = masks
        .iter()
        .map(|m| kernel_weight(mask_distance(m, &ones)?, config.kernel_width))
        .collect::<Result<Vec<_>>>()?;

    let fill = fill_colors(image, map, config.policy)?;
    let chunks: Vec<Result<Vec<ProbabilityVector>>> = masks
        .par_chunks(QUERY_CHUNK)
        .enumerate()
        .map(|(c, chunk)| query_chunk(image, map, &fill, chunk, c * QUERY_CHUNK, model))
        .collect();
    let mut predictions = Vec::with_capacity(masks.len());
    for chunk in chunks {
        predictions.extend(chunk?);
    }

    Ok(PerturbationBatch {
        masks,
        weights,
        predictions,
        seed: config.seed,
        kernel_width: config.kernel_width,
    })
}

fn query_chunk(
    image: &RasterImage,
    map: &SegmentMap,
    fill: &[[f64; 3]],
    masks: &[MaskVector],
    offset: usize,
    model: &dyn ModelAdapter,
) -> Result<Vec<ProbabilityVector>> {
    let images = masks
        .iter()
        .map(|m| apply_with_fill(image, map, m, fill))
        .collect::<Result<Vec<_>>>()?;
    match model.predict(&images) {
        Ok(out) if out.len() == images.len() => Ok(out),
        Ok(out) => Err(Error::Batch {
            index: offset,
            source: Box::new(Error::Protocol {
                message: format!("model returned {} outputs for {} inputs", out.len(), images.len()),
                line: String::new(),
            }),
        }),
        Err(err) => {
            // find the first failing sample so the error names it
            for (i, img) in images.iter().enumerate() {
                if let Err(e) = model.predict(std::slice::from_ref(img)) {
                    return Err(Error::Batch {
                        index: offset + i,
                        source: Box::new(e),
                    });
                }
            }
            Err(Error::Batch {
                index: offset,
                source: Box::new(err),
            })
        }
    }
}
