//! Superpixel maps: the interpretable features that explanations are expressed in.

mod lab;
mod slic;

use std::collections::VecDeque;
use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RasterImage;

pub use lab::{rgb_to_lab, D65_WHITE};
pub use slic::{segment_slic, SegmentationParams};

/// Per-pixel segment labels, contiguous from 0, each segment one 4-connected region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SegmentMapJson", into = "SegmentMapJson")]
pub struct SegmentMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    count: usize,
}

impl SegmentMap {
    /// Validates label completeness and connectivity.
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::contract(format!(
                "label grid of {} entries does not fit {width}x{height}",
                labels.len()
            )));
        }
        let count = labels.iter().max().map_or(0, |&m| m as usize + 1);
        let mut sizes = vec![0usize; count];
        for &l in &labels {
            sizes[l as usize] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::contract(format!("segment {empty} owns no pixels")));
        }
        let map = Self {
            width,
            height,
            labels,
            count,
        };
        let components = map.component_count();
        if components != count {
            return Err(Error::contract(format!(
                "{count} segments span {components} connected components"
            )));
        }
        Ok(map)
    }

    pub(crate) fn from_parts_unchecked(width: usize, height: usize, labels: Vec<u32>, count: usize) -> Self {
        debug_assert_eq!(labels.len(), width * height);
        Self {
            width,
            height,
            labels,
            count,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of segments `d`.
    pub fn segment_count(&self) -> usize {
        self.count
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn matches(&self, image: &RasterImage) -> bool {
        self.width == image.width() && self.height == image.height()
    }

    pub(crate) fn check_image(&self, image: &RasterImage) -> Result<()> {
        if self.matches(image) {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "segment map is {}x{} but image is {}x{}",
                self.width,
                self.height,
                image.width(),
                image.height()
            )))
        }
    }

    /// Flat pixel indices belonging to each segment.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    /// True if the pixel has a 4-neighbour in another segment or lies on the image edge.
    pub fn is_boundary(&self, index: usize) -> bool {
        let (x, y) = (index % self.width, index / self.width);
        if x == 0 || y == 0 || x + 1 == self.width || y + 1 == self.height {
            return true;
        }
        let l = self.labels[index];
        self.labels[index - 1] != l
            || self.labels[index + 1] != l
            || self.labels[index - self.width] != l
            || self.labels[index + self.width] != l
    }

    /// Number of 4-connected same-label regions.
    pub fn component_count(&self) -> usize {
        label_components(self.width, self.height, &self.labels).1
    }

    /// 16-bit grayscale PNG where gray level = segment id.
    pub fn encode_label_png(&self) -> Result<Vec<u8>> {
        if self.count > usize::from(u16::MAX) + 1 {
            return Err(Error::contract("too many segments for a 16-bit label image"));
        }
        let px: Vec<u16> = self.labels.iter().map(|&l| l as u16).collect();
        let img: ImageBuffer<Luma<u16>, _> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, px).expect("sized");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::contract(format!("png encode failed: {e}")))?;
        Ok(out.into_inner())
    }

    pub fn decode_label_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Decode {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
        let gray = img.to_luma16();
        let labels = gray.as_raw().iter().map(|&v| u32::from(v)).collect();
        Self::new(gray.width() as usize, gray.height() as usize, labels)
    }

    pub fn save_label_png(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path, &self.encode_label_png()?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        crate::io::read_json(path)
    }
}

/// Labels 4-connected components of equal values; returns (component id per pixel, count).
/// Components are numbered in raster order of their first pixel.
pub(crate) fn label_components(width: usize, height: usize, values: &[u32]) -> (Vec<u32>, usize) {
    const UNSEEN: u32 = u32::MAX;
    let mut comp = vec![UNSEEN; values.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..values.len() {
        if comp[start] != UNSEEN {
            continue;
        }
        comp[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % width, i / width);
            let mut visit = |j: usize| {
                if comp[j] == UNSEEN && values[j] == values[i] {
                    comp[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
        }
        next += 1;
    }
    (comp, next as usize)
}

#[derive(Serialize, Deserialize)]
struct SegmentMapJson {
    width: usize,
    height: usize,
    segments: usize,
    /// Row-major runs of `[label, length]`.
    rle: Vec<[u32; 2]>,
}

impl From<SegmentMap> for SegmentMapJson {
    fn from(m: SegmentMap) -> Self {
        let mut rle: Vec<[u32; 2]> = Vec::new();
        for &l in &m.labels {
            match rle.last_mut() {
                Some([label, run]) if *label == l => *run += 1,
                _ => rle.push([l, 1]),
            }
        }
        Self {
            width: m.width,
            height: m.height,
            segments: m.count,
            rle,
        }
    }
}

impl TryFrom<SegmentMapJson> for SegmentMap {
    type Error = Error;

    fn try_from(j: SegmentMapJson) -> Result<Self> {
        let mut labels = Vec::with_capacity(j.width * j.height);
        for [label, run] in j.rle {
            labels.extend(std::iter::repeat_n(label, run as usize));
        }
        let map = SegmentMap::new(j.width, j.height, labels)?;
        if map.count != j.segments {
            return Err(Error::contract(format!(
                "declared {} segments but labels contain {}",
                j.segments, map.count
            )));
        }
        Ok(map)
    }
}

/// Rectangular tiling into `rows x cols` tiles; leftover pixels join the last row/column.
pub fn segment_grid(image: &RasterImage, rows: usize, cols: usize) -> Result<SegmentMap> {
    grid_map(image.width(), image.height(), rows, cols)
}

pub fn grid_map(width: usize, height: usize, rows: usize, cols: usize) -> Result<SegmentMap> {
    if rows == 0 || cols == 0 || rows > height || cols > width {
        return Err(Error::contract(format!(
            "grid {rows}x{cols} does not fit a {width}x{height} image"
        )));
    }
    let (tile_h, tile_w) = (height / rows, width / cols);
    let mut labels = Vec::with_capacity(width * height);
    for y in 0..height {
        let tr = (y / tile_h).min(rows - 1);
        for x in 0..width {
            let tc = (x / tile_w).min(cols - 1);
            labels.push((tr * cols + tc) as u32);
        }
    }
    Ok(SegmentMap::from_parts_unchecked(width, height, labels, rows * cols))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_x: usize,
    pub min_y: usize,
    pub max_x: usize,
    pub max_y: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub pixels: usize,
    /// (x, y) mean of member pixel coordinates.
    pub centroid: (f64, f64),
    pub bbox: BoundingBox,
}

pub fn segment_stats(map: &SegmentMap) -> Vec<SegmentStats> {
    let mut acc: Vec<(usize, f64, f64, BoundingBox)> = vec![
        (
            0,
            0.0,
            0.0,
            BoundingBox {
                min_x: usize::MAX,
                min_y: usize::MAX,
                max_x: 0,
                max_y: 0,
            },
        );
        map.count
    ];
    for (i, &l) in map.labels.iter().enumerate() {
        let (x, y) = (i % map.width, i / map.width);
        let a = &mut acc[l as usize];
        a.0 += 1;
        a.1 += x as f64;
        a.2 += y as f64;
        a.3.min_x = a.3.min_x.min(x);
        a.3.min_y = a.3.min_y.min(y);
        a.3.max_x = a.3.max_x.max(x);
        a.3.max_y = a.3.max_y.max(y);
    }
    acc.into_iter()
        .map(|(n, sx, sy, bbox)| SegmentStats {
            pixels: n,
            centroid: (sx / n as f64, sy / n as f64),
            bbox,
        })
        .collect()
}
