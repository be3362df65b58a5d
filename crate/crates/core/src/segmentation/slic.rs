use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lab::rgb_to_lab;
use super::{label_components, SegmentMap};
use crate::error::{Error, Result};
use crate::image::RasterImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationParams {
    /// Requested number of superpixels; the result may differ slightly.
    pub target_segments: usize,
    /// Weight of spatial proximity against color distance.
    pub compactness: f64,
    pub max_iterations: usize,
    /// Recorded with the map. Center initialization is a fixed grid, so the seed does not
    /// change the result.
    pub seed: u64,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self {
            target_segments: 50,
            compactness: 10.0,
            max_iterations: 10,
            seed: 0,
        }
    }
}

impl SegmentationParams {
    pub fn validate(&self, pixels: usize) -> Result<()> {
        if self.target_segments == 0 || self.target_segments > pixels {
            return Err(Error::contract(format!(
                "target_segments must be in [1, {pixels}], got {}",
                self.target_segments
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::contract("max_iterations must be at least 1"));
        }
        if !self.compactness.is_finite() || self.compactness < 0.0 {
            return Err(Error::contract(format!(
                "compactness must be finite and non-negative, got {}",
                self.compactness
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Center {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

/// SLIC superpixels: k-means in (L, a, b, x, y) with a 2S x 2S search window per center,
/// followed by a pass that merges stray fragments so every segment is 4-connected.
pub fn segment_slic(image: &RasterImage, params: &SegmentationParams) -> Result<SegmentMap> {
    let (w, h) = (image.width(), image.height());
    params.validate(w * h)?;

    let lab: Vec<[f64; 3]> = (0..w * h).map(|i| rgb_to_lab(image.pixel_at(i))).collect();
    let step = ((w * h) as f64 / params.target_segments as f64).sqrt();
    let mut centers = initial_centers(&lab, w, h, params.target_segments);

    // spatial distance is scaled by (m / S)^2
    let spatial_scale = (params.compactness / step).powi(2);
    let mut labels = vec![0u32; w * h];
    let mut previous: Option<Vec<u32>> = None;
    for _ in 0..params.max_iterations {
        assign(&lab, w, &centers, step, spatial_scale, &mut labels);
        if previous.as_deref() == Some(labels.as_slice()) {
            break;
        }
        update_centers(&lab, w, &labels, &mut centers);
        previous = Some(labels.clone());
    }

    Ok(enforce_connectivity(w, h, &labels))
}

fn initial_centers(lab: &[[f64; 3]], w: usize, h: usize, k: usize) -> Vec<Center> {
    let nx = ((k as f64 * w as f64 / h as f64).sqrt().round() as usize).clamp(1, w);
    let ny = ((k as f64 / nx as f64).round() as usize).clamp(1, h);
    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let cx = (((i as f64 + 0.5) * w as f64 / nx as f64) as usize).min(w - 1);
            let cy = (((j as f64 + 0.5) * h as f64 / ny as f64) as usize).min(h - 1);
            let (x, y) = lowest_gradient(lab, w, h, cx, cy);
            centers.push(Center {
                lab: lab[y * w + x],
                x: x as f64,
                y: y as f64,
            });
        }
    }
    centers
}

/// Moves a seed to the lowest-gradient position in its 3x3 neighbourhood so it does not
/// start on an edge.
fn lowest_gradient(lab: &[[f64; 3]], w: usize, h: usize, cx: usize, cy: usize) -> (usize, usize) {
    let grad = |x: usize, y: usize| {
        let l = lab[y * w + x.saturating_sub(1)];
        let r = lab[y * w + (x + 1).min(w - 1)];
        let u = lab[y.saturating_sub(1) * w + x];
        let d = lab[(y + 1).min(h - 1) * w + x];
        sq_dist(&l, &r) + sq_dist(&u, &d)
    };
    let mut best = (cx, cy);
    let mut best_g = grad(cx, cy);
    for y in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
        for x in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
            let g = grad(x, y);
            if g < best_g {
                best_g = g;
                best = (x, y);
            }
        }
    }
    best
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Assignment step. Rows are independent and centers are read-only, so the parallel
/// result is identical to a sequential scan.
fn assign(lab: &[[f64; 3]], w: usize, centers: &[Center], step: f64, spatial_scale: f64, labels: &mut [u32]) {
    let distance = |c: &Center, p: &[f64; 3], x: f64, y: f64| {
        let ds = (c.x - x).powi(2) + (c.y - y).powi(2);
        sq_dist(&c.lab, p) + ds * spatial_scale
    };
    labels.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let yf = y as f64;
        let near_row: Vec<usize> = (0..centers.len())
            .filter(|&k| (centers[k].y - yf).abs() <= step)
            .collect();
        for (x, out) in row.iter_mut().enumerate() {
            let xf = x as f64;
            let p = &lab[y * w + x];
            let mut best: Option<(f64, usize)> = None;
            for &k in &near_row {
                let c = &centers[k];
                if (c.x - xf).abs() > step {
                    continue;
                }
                let d = distance(c, p, xf, yf);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, k));
                }
            }
            // no center within the window: fall back to the globally nearest one
            let k = match best {
                Some((_, k)) => k,
                None => {
                    let mut bk = 0;
                    let mut bd = f64::INFINITY;
                    for (k, c) in centers.iter().enumerate() {
                        let d = distance(c, p, xf, yf);
                        if d < bd {
                            bd = d;
                            bk = k;
                        }
                    }
                    bk
                }
            };
            *out = k as u32;
        }
    });
}

fn update_centers(lab: &[[f64; 3]], w: usize, labels: &[u32], centers: &mut [Center]) {
    let mut sums = vec![[0.0f64; 6]; centers.len()];
    for (i, &l) in labels.iter().enumerate() {
        let s = &mut sums[l as usize];
        let p = lab[i];
        s[0] += p[0];
        s[1] += p[1];
        s[2] += p[2];
        s[3] += (i % w) as f64;
        s[4] += (i / w) as f64;
        s[5] += 1.0;
    }
    for (c, s) in centers.iter_mut().zip(&sums) {
        if s[5] > 0.0 {
            let n = s[5];
            c.lab = [s[0] / n, s[1] / n, s[2] / n];
            c.x = s[3] / n;
            c.y = s[4] / n;
        }
    }
}

/// Keeps the largest 4-connected fragment of every cluster and merges each remaining
/// fragment into the adjacent kept segment with the most pixels (ties: smaller cluster id).
/// Final labels are numbered by first appearance in raster order.
fn enforce_connectivity(w: usize, h: usize, clusters: &[u32]) -> SegmentMap {
    let (comp, ncomp) = label_components(w, h, clusters);

    let mut size = vec![0usize; ncomp];
    let mut cluster_of = vec![0u32; ncomp];
    for (i, &c) in comp.iter().enumerate() {
        size[c as usize] += 1;
        cluster_of[c as usize] = clusters[i];
    }

    let nclusters = clusters.iter().max().map_or(0, |&m| m as usize + 1);
    let mut largest: Vec<Option<usize>> = vec![None; nclusters];
    for c in 0..ncomp {
        let slot = &mut largest[cluster_of[c] as usize];
        if slot.is_none_or(|best| size[c] > size[best]) {
            *slot = Some(c);
        }
    }
    let mut kept = vec![false; ncomp];
    for c in largest.into_iter().flatten() {
        kept[c] = true;
    }

    let mut adjacent = vec![BTreeSet::new(); ncomp];
    for y in 0..h {
        for x in 0..w {
            let a = comp[y * w + x];
            if x + 1 < w {
                let b = comp[y * w + x + 1];
                if a != b {
                    adjacent[a as usize].insert(b);
                    adjacent[b as usize].insert(a);
                }
            }
            if y + 1 < h {
                let b = comp[(y + 1) * w + x];
                if a != b {
                    adjacent[a as usize].insert(b);
                    adjacent[b as usize].insert(a);
                }
            }
        }
    }

    // union-find over components; kept components are their own roots
    let mut parent: Vec<usize> = (0..ncomp).collect();
    fn find(parent: &mut [usize], mut c: usize) -> usize {
        while parent[c] != c {
            parent[c] = parent[parent[c]];
            c = parent[c];
        }
        c
    }
    let mut seg_size = size.clone();
    let mut orphans: Vec<usize> = (0..ncomp).filter(|&c| !kept[c]).collect();
    while !orphans.is_empty() {
        let mut still = Vec::new();
        for &o in &orphans {
            let mut best: Option<usize> = None;
            for &nb in &adjacent[o] {
                let root = find(&mut parent, nb as usize);
                if !kept[root] {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some(b) => {
                        seg_size[root] > seg_size[b]
                            || (seg_size[root] == seg_size[b] && cluster_of[root] < cluster_of[b])
                    }
                };
                if better {
                    best = Some(root);
                }
            }
            match best {
                Some(root) => {
                    parent[o] = root;
                    seg_size[root] += size[o];
                }
                None => still.push(o),
            }
        }
        assert!(
            still.len() < orphans.len(),
            "orphan fragments with no path to a kept segment"
        );
        orphans = still;
    }

    let mut final_label = vec![u32::MAX; ncomp];
    let mut next = 0u32;
    let mut labels = Vec::with_capacity(w * h);
    for &c in &comp {
        let root = find(&mut parent, c as usize);
        if final_label[root] == u32::MAX {
            final_label[root] = next;
            next += 1;
        }
        labels.push(final_label[root]);
    }
    SegmentMap::from_parts_unchecked(w, h, labels, next as usize)
}
