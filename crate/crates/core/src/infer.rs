//! Open-vocabulary segmentation inference and mIoU evaluation.
//!
//! Candidate class names are rendered into a prompt template and encoded by
//! the text encoder. Region features score against label features by cosine
//! similarity, patches inherit their region's scores through the hard
//! mapping, the patch-grid score map is bilinearly upsampled to pixel
//! resolution (align-corners-false), and each pixel takes its best class if
//! the similarity clears the background threshold.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image_io;
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};
use crate::text::{tokenize, UNK_ID};

/// Candidate label names plus the prompt template used to phrase them.
/// The template must contain exactly one `{}` placeholder.
#[derive(Debug, Clone)]
pub struct LabelSet {
    pub names: Vec<String>,
    pub template: String,
}

pub const DEFAULT_TEMPLATE: &str = "a photo of a {}.";

impl LabelSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        Self::with_template(names, DEFAULT_TEMPLATE.to_string())
    }

    pub fn with_template(names: Vec<String>, template: String) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Usage("label set must not be empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(Error::Usage("empty label name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::Usage(format!("duplicate label `{n}`")));
            }
        }
        if template.matches("{}").count() != 1 {
            return Err(Error::Usage(format!(
                "template `{template}` must contain exactly one {{}} placeholder"
            )));
        }
        Ok(LabelSet { names, template })
    }

    pub fn render(&self, name: &str) -> String {
        self.template.replacen("{}", name, 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Encode every label through the prompt template: one feature row per
/// label, `[T×H]`. Label words missing from the vocabulary degrade to the
/// unknown token with a warning.
pub fn label_features(model: &Model, labels: &LabelSet) -> Result<Tensor> {
    let mut data = Vec::with_capacity(labels.len() * model.config.hidden);
    for name in &labels.names {
        let text = labels.render(name);
        let ids = tokenize(&text, &model.vocab, model.config.max_text_len);
        if ids.contains(&UNK_ID) {
            eprintln!("warning: label `{name}` contains words outside the vocabulary");
        }
        let mut g = Graph::new();
        let feat = model.encode_text_eval(&mut g, &text)?;
        data.extend_from_slice(g.data(feat));
    }
    Tensor::new(vec![labels.len(), model.config.hidden], data)
}

/// Cosine similarity of every region row against every label row, `[L×T]`.
pub fn region_similarity(regions: &Tensor, label_feats: &Tensor) -> Result<Tensor> {
    let (l, h) = (regions.rows(), regions.cols());
    let (t, h2) = (label_feats.rows(), label_feats.cols());
    if h != h2 {
        return Err(Error::ShapeMismatch {
            op: "region_similarity",
            detail: format!("hidden widths {h} vs {h2}"),
        });
    }
    let norms = |m: &Tensor, what: &str| -> Result<Vec<f64>> {
        m.data
            .chunks(h)
            .enumerate()
            .map(|(i, row)| {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n < 1e-15 {
                    Err(Error::InvalidInput(format!("zero-norm {what} row {i}")))
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let rn = norms(regions, "region")?;
    let ln = norms(label_feats, "label")?;
    let mut out = vec![0.0; l * t];
    for i in 0..l {
        for j in 0..t {
            let dot: f64 = regions.data[i * h..(i + 1) * h]
                .iter()
                .zip(&label_feats.data[j * h..(j + 1) * h])
                .map(|(a, b)| a * b)
                .sum();
            out[i * t + j] = dot / (rn[i] * ln[j]);
        }
    }
    Tensor::new(vec![l, t], out)
}

/// Each patch inherits its assigned region's similarity row: the product of
/// the hard one-hot mapping with the region similarity matrix, `[N×T]`.
pub fn patch_similarity(hard: &Tensor, region_sims: &Tensor) -> Result<Tensor> {
    let (n, l) = (hard.rows(), hard.cols());
    let (l2, t) = (region_sims.rows(), region_sims.cols());
    if l != l2 {
        return Err(Error::ShapeMismatch {
            op: "patch_similarity",
            detail: format!("{l} centers vs {l2} similarity rows"),
        });
    }
    let mut out = vec![0.0; n * t];
    for (j, row) in hard.data.chunks(l).enumerate() {
        let Some(center) = row.iter().position(|&v| v == 1.0) else {
            return Err(Error::InvalidInput(format!("mapping row {j} is not one-hot")));
        };
        out[j * t..(j + 1) * t].copy_from_slice(&region_sims.data[center * t..(center + 1) * t]);
    }
    Tensor::new(vec![n, t], out)
}

/// Bilinear upsampling (align-corners-false) of the per-class patch scores
/// from the patch grid to pixel resolution. Returns `[T×height×width]`.
pub fn upsample_similarity(
    patch_sims: &Tensor,
    grid: (usize, usize),
    size: (usize, usize),
) -> Result<Vec<f64>> {
    let (gr, gc) = grid;
    let (height, width) = size;
    let (n, t) = (patch_sims.rows(), patch_sims.cols());
    if gr * gc != n {
        return Err(Error::ShapeMismatch {
            op: "upsample_similarity",
            detail: format!("grid {gr}x{gc} vs {n} patches"),
        });
    }
    let mut out = vec![0.0; t * height * width];
    let sy = gr as f64 / height as f64;
    let sx = gc as f64 / width as f64;
    for class in 0..t {
        let at = |r: usize, c: usize| patch_sims.data[(r * gc + c) * t + class];
        for y in 0..height {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            let y0 = src_y.floor();
            let wy = src_y - y0;
            let y0c = (y0 as isize).clamp(0, gr as isize - 1) as usize;
            let y1c = (y0 as isize + 1).clamp(0, gr as isize - 1) as usize;
            for x in 0..width {
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                let x0 = src_x.floor();
                let wx = src_x - x0;
                let x0c = (x0 as isize).clamp(0, gc as isize - 1) as usize;
                let x1c = (x0 as isize + 1).clamp(0, gc as isize - 1) as usize;
                let top = at(y0c, x0c) * (1.0 - wx) + at(y0c, x1c) * wx;
                let bot = at(y1c, x0c) * (1.0 - wx) + at(y1c, x1c) * wx;
                out[class * height * width + y * width + x] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Ok(out)
}

/// Per-pixel class decision: argmax over classes (ties to the lowest index),
/// kept only if the winning similarity reaches `threshold`, else background
/// (−1).
pub fn assign_pixels(pixel_sims: &[f64], num_classes: usize, pixels: usize, threshold: f64) -> Vec<i32> {
    let mut out = vec![-1i32; pixels];
    for p in 0..pixels {
        let mut best = 0usize;
        let mut best_v = pixel_sims[p];
        for c in 1..num_classes {
            let v = pixel_sims[c * pixels + p];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        if best_v >= threshold {
            out[p] = best as i32;
        }
    }
    out
}

/// Full inference output for one image.
pub struct SegmentationResult {
    pub width: usize,
    pub height: usize,
    pub num_labels: usize,
    /// Per-pixel class index, −1 for background.
    pub pixel_classes: Vec<i32>,
    /// `[T×height×width]` upsampled similarity volume.
    pub pixel_similarity: Vec<f64>,
    /// `[N×T]` patch-level similarities.
    pub patch_similarity: Tensor,
    /// `[L×T]` region-level similarities.
    pub region_similarity: Tensor,
}

/// End-to-end eval-mode segmentation of one image against precomputed label
/// features.
pub fn segment_image(
    model: &Model,
    pixels: &[f64],
    label_feats: &Tensor,
    threshold: f64,
) -> Result<SegmentationResult> {
    let cfg = &model.config;
    let mut g = Graph::new();
    let enc = model.encode_image_eval(&mut g, pixels)?;
    let regions = Tensor::new(vec![cfg.centers, cfg.hidden], g.data(enc.regions).to_vec())?;
    let hard = Tensor::new(
        vec![cfg.num_patches(), cfg.centers],
        g.data(enc.mapping.hard).to_vec(),
    )?;
    let shat = region_similarity(&regions, label_feats)?;
    let s = patch_similarity(&hard, &shat)?;
    let grid = cfg.grid();
    let pixel_similarity = upsample_similarity(&s, (grid, grid), (cfg.image_size, cfg.image_size))?;
    let pixel_classes = assign_pixels(
        &pixel_similarity,
        label_feats.rows(),
        cfg.image_size * cfg.image_size,
        threshold,
    );
    Ok(SegmentationResult {
        width: cfg.image_size,
        height: cfg.image_size,
        num_labels: label_feats.rows(),
        pixel_classes,
        pixel_similarity,
        patch_similarity: s,
        region_similarity: shat,
    })
}

// ── mIoU ────────────────────────────────────────────────────────────────

/// Per-class intersection/union counters, mergeable across images by
/// addition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoUAccumulator {
    pub num_classes: usize,
    pub include_background: bool,
    /// Index 0 is background when included, then classes 0..num_classes.
    intersection: Vec<u64>,
    union: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct ClassIoU {
    /// −1 for background.
    pub class: i32,
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
}

#[derive(Debug, Clone)]
pub struct IoUReport {
    pub per_class: Vec<ClassIoU>,
    pub miou: f64,
}

impl IoUAccumulator {
    pub fn new(num_classes: usize, include_background: bool) -> Self {
        let slots = num_classes + usize::from(include_background);
        IoUAccumulator {
            num_classes,
            include_background,
            intersection: vec![0; slots],
            union: vec![0; slots],
        }
    }

    fn slot(&self, class: i32) -> Option<usize> {
        if class == -1 {
            self.include_background.then_some(0)
        } else if (class as usize) < self.num_classes {
            Some(class as usize + usize::from(self.include_background))
        } else {
            None
        }
    }

    pub fn add(&mut self, pred: &[i32], gt: &[i32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch {
                op: "miou",
                detail: format!("{} predictions vs {} labels", pred.len(), gt.len()),
            });
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g >= self.num_classes as i32 {
                return Err(Error::InvalidInput(format!("ground-truth class {g} out of range")));
            }
            let ps = self.slot(p);
            let gs = self.slot(g);
            match (ps, gs) {
                (Some(a), Some(b)) if a == b => {
                    self.intersection[a] += 1;
                    self.union[a] += 1;
                }
                _ => {
                    if let Some(a) = ps {
                        self.union[a] += 1;
                    }
                    if let Some(b) = gs {
                        self.union[b] += 1;
                    }
                }
            }
        }
        Ok(())
    }

    /// Merge counters from another accumulator (order-independent).
    pub fn merge(&mut self, other: &IoUAccumulator) {
        debug_assert_eq!(self.intersection.len(), other.intersection.len());
        for i in 0..self.intersection.len() {
            self.intersection[i] += other.intersection[i];
            self.union[i] += other.union[i];
        }
    }

    /// Classes with an empty union are excluded from the mean.
    pub fn report(&self) -> IoUReport {
        let mut per_class = Vec::new();
        let mut sum = 0.0;
        let mut counted = 0usize;
        for slot in 0..self.intersection.len() {
            let class = if self.include_background {
                slot as i32 - 1
            } else {
                slot as i32
            };
            let (inter, uni) = (self.intersection[slot], self.union[slot]);
            let iou = if uni > 0 { inter as f64 / uni as f64 } else { 0.0 };
            if uni > 0 {
                sum += iou;
                counted += 1;
            }
            per_class.push(ClassIoU { class, intersection: inter, union: uni, iou });
        }
        let miou = if counted > 0 { sum / counted as f64 } else { 0.0 };
        IoUReport { per_class, miou }
    }
}

/// Single-pair convenience wrapper.
pub fn miou(pred: &[i32], gt: &[i32], num_classes: usize, include_background: bool) -> Result<IoUReport> {
    let mut acc = IoUAccumulator::new(num_classes, include_background);
    acc.add(pred, gt)?;
    Ok(acc.report())
}

impl IoUReport {
    /// CSV with header `class,intersection,union,iou` and a final `miou` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,intersection,union,iou\n");
        for c in &self.per_class {
            let _ = writeln!(s, "{},{},{},{}", c.class, c.intersection, c.union, c.iou);
        }
        let _ = writeln!(s, "miou,,,{}", self.miou);
        s
    }
}

/// Convert a stored mask (255 = background) to signed class indices.
pub fn mask_to_classes(mask: &[u8]) -> Vec<i32> {
    mask.iter().map(|&v| if v == 255 { -1 } else { v as i32 }).collect()
}

/// Chance-level mIoU estimated by spatially shuffling every prediction map
/// `reps` times and averaging the resulting scores.
pub fn permutation_baseline(
    preds: &[Vec<i32>],
    gts: &[Vec<i32>],
    num_classes: usize,
    include_background: bool,
    reps: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..reps {
        let mut acc = IoUAccumulator::new(num_classes, include_background);
        for (pred, gt) in preds.iter().zip(gts) {
            let mut shuffled = pred.clone();
            rng.shuffle(&mut shuffled);
            acc.add(&shuffled, gt)?;
        }
        total += acc.report().miou;
    }
    Ok(total / reps as f64)
}

/// Color-coded P6 mask plus a sidecar text file mapping class index to
/// label name.
pub fn dump_prediction(
    path_base: &Path,
    classes: &[i32],
    width: usize,
    height: usize,
    labels: &LabelSet,
) -> Result<()> {
    let mut pixels = vec![0.0; 3 * width * height];
    let plane = width * height;
    for (i, &c) in classes.iter().enumerate() {
        let rgb = class_color(c);
        for ch in 0..3 {
            pixels[ch * plane + i] = rgb[ch];
        }
    }
    let img_path = path_base.with_extension("ppm");
    image_io::write_ppm(&img_path, &pixels, width, height)?;

    let mut sidecar = String::from("-1\tbackground\n");
    for (i, name) in labels.names.iter().enumerate() {
        let _ = writeln!(sidecar, "{i}\t{name}");
    }
    let txt_path = path_base.with_extension("labels.txt");
    std::fs::write(&txt_path, sidecar).map_err(|e| Error::io(&txt_path, e))
}

/// Fixed palette; background is black.
pub fn class_color(class: i32) -> [f64; 3] {
    const PALETTE: [[u8; 3]; 12] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [0, 128, 128],
        [220, 190, 255],
        [170, 110, 40],
    ];
    if class < 0 {
        return [0.0, 0.0, 0.0];
    }
    let c = PALETTE[class as usize % PALETTE.len()];
    [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0]
}
