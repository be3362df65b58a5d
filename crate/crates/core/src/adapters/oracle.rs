//! Analytic models with known ground truth, used to check explanations.

use super::{default_class_names, ModelAdapter};
use crate::error::{Error, Result};
use crate::image::{ProbabilityVector, RasterImage};
use crate::segmentation::SegmentMap;

/// Per-channel tolerance for "pixel still matches the original".
pub const INTACT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedOracleSpec {
    pub key_segment_map: SegmentMap,
    pub key_segment: usize,
    pub p_hi: f64,
    pub p_lo: f64,
}

impl PlantedOracleSpec {
    pub fn new(key_segment_map: SegmentMap, key_segment: usize) -> Result<Self> {
        Self::with_probs(key_segment_map, key_segment, 0.9, 0.1)
    }

    pub fn with_probs(key_segment_map: SegmentMap, key_segment: usize, p_hi: f64, p_lo: f64) -> Result<Self> {
        if key_segment >= key_segment_map.segment_count() {
            return Err(Error::contract(format!(
                "key segment {key_segment} not in a map of {} segments",
                key_segment_map.segment_count()
            )));
        }
        if !(0.0 <= p_lo && p_lo < p_hi && p_hi <= 1.0) {
            return Err(Error::contract(format!(
                "need 0 <= p_lo < p_hi <= 1, got p_lo={p_lo} p_hi={p_hi}"
            )));
        }
        Ok(Self {
            key_segment_map,
            key_segment,
            p_hi,
            p_lo,
        })
    }
}

fn intact(reference: &RasterImage, image: &RasterImage, index: usize) -> bool {
    let (a, b) = (reference.pixel_at(index), image.pixel_at(index));
    a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= INTACT_TOLERANCE)
}

fn check_dims(reference: &RasterImage, image: &RasterImage) -> Result<()> {
    if (reference.width(), reference.height()) != (image.width(), image.height()) {
        return Err(Error::contract(format!(
            "oracle expects {}x{} images, got {}x{}",
            reference.width(),
            reference.height(),
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// Says "glaucoma" with `p_hi` exactly when the key segment is untouched, otherwise `p_lo`.
pub struct PlantedOracle {
    id: String,
    class_names: Vec<String>,
    spec: PlantedOracleSpec,
    reference: RasterImage,
    key_pixels: Vec<usize>,
}

impl PlantedOracle {
    /// `reference` is the unperturbed image the key segment is compared against.
    pub fn new(spec: PlantedOracleSpec, reference: RasterImage) -> Result<Self> {
        spec.key_segment_map.check_image(&reference)?;
        let key = spec.key_segment as u32;
        let key_pixels = spec
            .key_segment_map
            .labels()
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == key).then_some(i))
            .collect();
        Ok(Self {
            id: format!("oracle:segment-{}", spec.key_segment),
            class_names: default_class_names(),
            spec,
            reference,
            key_pixels,
        })
    }

    pub fn spec(&self) -> &PlantedOracleSpec {
        &self.spec
    }

    pub fn predict_one(&self, image: &RasterImage) -> Result<ProbabilityVector> {
        check_dims(&self.reference, image)?;
        let p = if self.key_pixels.iter().all(|&i| intact(&self.reference, image, i)) {
            self.spec.p_hi
        } else {
            self.spec.p_lo
        };
        ProbabilityVector::new(vec![1.0 - p, p])
    }
}

impl ModelAdapter for PlantedOracle {
    fn id(&self) -> &str {
        &self.id
    }

    fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn predict(&self, images: &[RasterImage]) -> Result<Vec<ProbabilityVector>> {
        images.iter().map(|img| self.predict_one(img)).collect()
    }
}

/// Glaucoma probability equals the fraction of key pixels still matching the reference.
pub struct MonotoneOracle {
    id: String,
    class_names: Vec<String>,
    reference: RasterImage,
    key_pixels: Vec<usize>,
}

impl MonotoneOracle {
    pub fn new(reference: RasterImage, key_pixels: Vec<usize>) -> Result<Self> {
        if key_pixels.is_empty() {
            return Err(Error::contract("monotone oracle needs at least one key pixel"));
        }
        if let Some(bad) = key_pixels.iter().find(|&&i| i >= reference.pixel_count()) {
            return Err(Error::contract(format!("key pixel {bad} outside the image")));
        }
        Ok(Self {
            id: "oracle:monotone".into(),
            class_names: default_class_names(),
            reference,
            key_pixels,
        })
    }

    /// Key region = all pixels within `radius` of `(cx, cy)`.
    pub fn disk(reference: RasterImage, cx: f64, cy: f64, radius: f64) -> Result<Self> {
        let w = reference.width();
        let key = (0..reference.pixel_count())
            .filter(|&i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius
            })
            .collect();
        Self::new(reference, key)
    }

    pub fn predict_one(&self, image: &RasterImage) -> Result<ProbabilityVector> {
        check_dims(&self.reference, image)?;
        let kept = self
            .key_pixels
            .iter()
            .filter(|&&i| intact(&self.reference, image, i))
            .count();
        let p = kept as f64 / self.key_pixels.len() as f64;
        ProbabilityVector::new(vec![1.0 - p, p])
    }
}

impl ModelAdapter for MonotoneOracle {
    fn id(&self) -> &str {
        &self.id
    }

    fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn predict(&self, images: &[RasterImage]) -> Result<Vec<ProbabilityVector>> {
        images.iter().map(|img| self.predict_one(img)).collect()
    }
}
