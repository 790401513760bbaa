//! Unsupervised graph-based superpixel segmentation and the pixel-to-patch
//! label transfer that defines the super-patch groups used by the
//! consistency loss.
//!
//! The segmentation follows the classic efficient graph-based method: build
//! an 8-connected pixel graph weighted by RGB distance (after optional
//! Gaussian smoothing), sort edges ascending, and merge components whenever
//! the joining edge is no heavier than the internal difference of either
//! side plus `k / |component|`. A post-pass folds components smaller than
//! `min_size` into their lowest-weight neighbor. Edge order ties break on
//! `(weight, a, b)` so the labeling is fully deterministic.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Undirected weighted grid graph over image pixels.
#[derive(Debug, Clone)]
pub struct PixelGraph {
    pub width: usize,
    pub height: usize,
    /// `(a, b, weight)` with `a < b`, each undirected edge once.
    pub edges: Vec<(u32, u32, f64)>,
}

/// Dense per-pixel segment ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelLabeling {
    pub width: usize,
    pub height: usize,
    pub num_segments: usize,
    /// Row-major segment id per pixel, values in `[0, num_segments)`.
    pub pixel_ids: Vec<u32>,
}

/// Patch labels derived from a labeling, plus the groups they induce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGroups {
    /// Floor of the mean pixel id inside each patch.
    pub patch_labels: Vec<u32>,
    /// For each patch j, the sorted indices of patches sharing its label
    /// (always contains j itself).
    pub groups: Vec<Vec<usize>>,
}

/// Separable Gaussian blur per channel; `sigma <= 0` returns the input.
pub fn gaussian_smooth(pixels: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return pixels.to_vec();
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        kernel.push((-d * d / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = vec![0.0; pixels.len()];
    let mut out = vec![0.0; pixels.len()];
    for c in 0..3 {
        let plane = c * width * height;
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let xs = clamp(x as isize + i as isize - radius as isize, width);
                    acc += k * pixels[plane + y * width + xs];
                }
                tmp[plane + y * width + x] = acc;
            }
        }
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let ys = clamp(y as isize + i as isize - radius as isize, height);
                    acc += k * tmp[plane + ys * width + x];
                }
                out[plane + y * width + x] = acc;
            }
        }
    }
    out
}

/// 8-neighborhood pixel graph with Euclidean RGB edge weights, built on the
/// (optionally smoothed) image. `pixels` is channel-major `[3×h×w]`.
pub fn build_graph(pixels: &[f64], width: usize, height: usize, sigma: f64) -> PixelGraph {
    let img = gaussian_smooth(pixels, width, height, sigma);
    let plane = width * height;
    let dist = |a: usize, b: usize| {
        let mut s = 0.0;
        for c in 0..3 {
            let d = img[c * plane + a] - img[c * plane + b];
            s += d * d;
        }
        s.sqrt()
    };
    let mut edges = Vec::with_capacity(4 * plane);
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            if x + 1 < width {
                edges.push((p as u32, (p + 1) as u32, dist(p, p + 1)));
            }
            if y + 1 < height {
                edges.push((p as u32, (p + width) as u32, dist(p, p + width)));
                if x + 1 < width {
                    edges.push((p as u32, (p + width + 1) as u32, dist(p, p + width + 1)));
                }
                if x > 0 {
                    edges.push((p as u32, (p + width - 1) as u32, dist(p, p + width - 1)));
                }
            }
        }
    }
    PixelGraph { width, height, edges }
}

struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
    /// Internal difference: max weight of a merged edge inside the component.
    internal: Vec<f64>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            self.parent[x as usize] = self.parent[self.parent[x as usize] as usize];
            x = self.parent[x as usize];
        }
        x
    }

    fn join(&mut self, a: u32, b: u32, w: f64) -> u32 {
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] { (a, b) } else { (b, a) };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        self.internal[big as usize] = self.internal[big as usize].max(self.internal[small as usize]).max(w);
        big
    }
}

/// Segment the pixel graph; see the module docs for the merge rule.
pub fn felzenszwalb_segment(graph: &PixelGraph, k: f64, min_size: usize) -> Result<SuperpixelLabeling> {
    if k <= 0.0 {
        return Err(Error::InvalidConfig(format!("merge threshold k = {k} must be > 0")));
    }
    if min_size == 0 {
        return Err(Error::InvalidConfig("min_size must be at least 1".into()));
    }
    let n = graph.width * graph.height;
    let mut edges = graph.edges.clone();
    edges.sort_by(|x, y| {
        x.2.partial_cmp(&y.2)
            .expect("finite edge weights")
            .then(x.0.cmp(&y.0))
            .then(x.1.cmp(&y.1))
    });

    let mut uf = UnionFind::new(n);
    for &(a, b, w) in &edges {
        let ra = uf.find(a);
        let rb = uf.find(b);
        if ra == rb {
            continue;
        }
        let ta = uf.internal[ra as usize] + k / uf.size[ra as usize] as f64;
        let tb = uf.internal[rb as usize] + k / uf.size[rb as usize] as f64;
        if w <= ta.min(tb) {
            uf.join(ra, rb, w);
        }
    }

    // Fold undersized components into their cheapest neighbor: sweeping the
    // sorted edges again merges each small component across its lowest-weight
    // boundary edge first.
    for &(a, b, w) in &edges {
        let ra = uf.find(a);
        let rb = uf.find(b);
        if ra != rb && ((uf.size[ra as usize] as usize) < min_size || (uf.size[rb as usize] as usize) < min_size) {
            uf.join(ra, rb, w);
        }
    }

    // Dense relabel in scan order.
    let mut ids = vec![u32::MAX; n];
    let mut remap: Vec<u32> = vec![u32::MAX; n];
    let mut next = 0u32;
    for p in 0..n {
        let root = uf.find(p as u32) as usize;
        if remap[root] == u32::MAX {
            remap[root] = next;
            next += 1;
        }
        ids[p] = remap[root];
    }
    Ok(SuperpixelLabeling {
        width: graph.width,
        height: graph.height,
        num_segments: next as usize,
        pixel_ids: ids,
    })
}

/// Convenience: smooth, build, segment.
pub fn segment_image(
    pixels: &[f64],
    width: usize,
    height: usize,
    sigma: f64,
    k: f64,
    min_size: usize,
) -> Result<SuperpixelLabeling> {
    felzenszwalb_segment(&build_graph(pixels, width, height, sigma), k, min_size)
}

impl SuperpixelLabeling {
    /// Patch label = floor of the mean pixel id over the patch; groups
    /// collect patches sharing a label. Requires dimensions divisible by
    /// `patch_size`.
    pub fn super_patch_groups(&self, patch_size: usize) -> Result<PatchGroups> {
        if patch_size == 0 || self.width % patch_size != 0 || self.height % patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "{}x{} image not divisible by patch size {patch_size}",
                self.width, self.height
            )));
        }
        let (gw, gh) = (self.width / patch_size, self.height / patch_size);
        let mut patch_labels = Vec::with_capacity(gw * gh);
        for gy in 0..gh {
            for gx in 0..gw {
                let mut sum: u64 = 0;
                for py in 0..patch_size {
                    for px in 0..patch_size {
                        sum += self.pixel_ids[(gy * patch_size + py) * self.width + gx * patch_size + px] as u64;
                    }
                }
                let mean = sum as f64 / (patch_size * patch_size) as f64;
                patch_labels.push(mean.floor() as u32);
            }
        }
        let n = patch_labels.len();
        let groups = (0..n)
            .map(|j| (0..n).filter(|&jj| patch_labels[jj] == patch_labels[j]).collect())
            .collect();
        Ok(PatchGroups { patch_labels, groups })
    }

    /// Fraction of patches whose floor-of-mean label is not the id of any
    /// pixel they contain — the label aliased to an unrelated segment.
    pub fn label_aliasing_rate(&self, patch_size: usize) -> Result<f64> {
        let groups = self.super_patch_groups(patch_size)?;
        let (gw, gh) = (self.width / patch_size, self.height / patch_size);
        let mut aliased = 0usize;
        for gy in 0..gh {
            for gx in 0..gw {
                let label = groups.patch_labels[gy * gw + gx];
                let mut present = false;
                'scan: for py in 0..patch_size {
                    for px in 0..patch_size {
                        if self.pixel_ids[(gy * patch_size + py) * self.width + gx * patch_size + px] == label {
                            present = true;
                            break 'scan;
                        }
                    }
                }
                if !present {
                    aliased += 1;
                }
            }
        }
        Ok(aliased as f64 / (gw * gh) as f64)
    }

    // ── cache file: width, height, num_segments, then row-major pixel ids,
    //    all as little-endian u32 ─────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + 4 * self.pixel_ids.len());
        for v in [self.width as u32, self.height as u32, self.num_segments as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.pixel_ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 {
            return Err(Error::Data(format!("superpixel cache {} truncated", path.display())));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        let (width, height, num_segments) = (word(0) as usize, word(1) as usize, word(2) as usize);
        if bytes.len() != 12 + 4 * width * height {
            return Err(Error::Data(format!(
                "superpixel cache {}: expected {} pixels, file holds {} bytes",
                path.display(),
                width * height,
                bytes.len()
            )));
        }
        let pixel_ids: Vec<u32> = (0..width * height).map(|i| word(3 + i)).collect();
        if pixel_ids.iter().any(|&id| id as usize >= num_segments) {
            return Err(Error::Data(format!("superpixel cache {}: id out of range", path.display())));
        }
        Ok(SuperpixelLabeling { width, height, num_segments, pixel_ids })
    }
}
