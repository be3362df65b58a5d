//! Explanation overlays.

use crate::error::{Error, Result};
use crate::image::RasterImage;
use crate::segmentation::SegmentMap;
use crate::surrogate::{rank_by_magnitude, Explanation};

pub const TINT_ALPHA: f64 = 0.35;
pub const POSITIVE_COLOR: [f64; 3] = [0.0, 1.0, 0.0];
pub const NEGATIVE_COLOR: [f64; 3] = [1.0, 0.0, 0.0];

/// Tints the `top_k` segments with the largest `|weight|` (green for non-negative weights,
/// red for negative) and draws a 1-pixel outline in the same color along their boundary.
/// All other pixels are copied unchanged. `top_k` is clamped to the segment count.
pub fn render_overlay(
    image: &RasterImage,
    segments: &SegmentMap,
    explanation: &Explanation,
    top_k: usize,
) -> Result<RasterImage> {
    segments.check_image(image)?;
    if explanation.segment_count() != segments.segment_count() {
        return Err(Error::contract(format!(
            "explanation covers {} segments but the map has {}",
            explanation.segment_count(),
            segments.segment_count()
        )));
    }
    let mut color: Vec<Option<[f64; 3]>> = vec![None; segments.segment_count()];
    for seg in rank_by_magnitude(&explanation.weights).into_iter().take(top_k) {
        color[seg] = Some(if explanation.weights[seg] < 0.0 {
            NEGATIVE_COLOR
        } else {
            POSITIVE_COLOR
        });
    }

    let mut out = image.clone();
    for (i, &l) in segments.labels().iter().enumerate() {
        let Some(tint) = color[l as usize] else {
            continue;
        };
        let px = if segments.is_boundary(i) {
            tint
        } else {
            let p = image.pixel_at(i);
            [0, 1, 2].map(|c| (1.0 - TINT_ALPHA) * p[c] + TINT_ALPHA * tint[c])
        };
        out.set_pixel_at(i, px);
    }
    Ok(out)
}
