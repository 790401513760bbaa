//! Synthetic shape datasets and the dataset manifest.
//!
//! Each sample is a solid-background image with one to three non-overlapping
//! colored shapes, a caption listing them, and a pixel-exact class mask.
//! Everything derives from the seed, so a dataset regenerates byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image_io;
use crate::parallel::map_indexed;
use crate::rng::Rng;
use crate::text::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

/// One drawable class: a (color, shape) pair named like "red circle".
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeClass {
    pub name: String,
    pub color: [f64; 3],
    pub kind: ShapeKind,
}

/// The fixed palette classes are drawn from.
pub fn class_palette() -> Vec<ShapeClass> {
    let mk = |name: &str, color: [f64; 3], kind| ShapeClass { name: name.to_string(), color, kind };
    vec![
        mk("red circle", [0.9, 0.1, 0.1], ShapeKind::Circle),
        mk("blue square", [0.1, 0.2, 0.9], ShapeKind::Square),
        mk("green triangle", [0.1, 0.8, 0.2], ShapeKind::Triangle),
        mk("yellow circle", [0.9, 0.85, 0.1], ShapeKind::Circle),
        mk("magenta square", [0.85, 0.1, 0.8], ShapeKind::Square),
        mk("cyan triangle", [0.1, 0.8, 0.85], ShapeKind::Triangle),
    ]
}

/// Resolve a comma-separated list of palette names; empty takes the first
/// `default_count`.
pub fn resolve_classes(spec: &str, default_count: usize) -> Result<Vec<ShapeClass>> {
    let palette = class_palette();
    if spec.trim().is_empty() {
        return Ok(palette.into_iter().take(default_count).collect());
    }
    spec.split(',')
        .map(|raw| {
            let name = raw.trim();
            palette
                .iter()
                .find(|c| c.name == name)
                .cloned()
                .ok_or_else(|| {
                    let known: Vec<&str> = palette.iter().map(|c| c.name.as_str()).collect();
                    Error::InvalidConfig(format!("unknown class `{name}`; palette: {}", known.join(", ")))
                })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub caption: PathBuf,
    pub mask: Option<PathBuf>,
    pub superpixel: Option<PathBuf>,
}

/// Paths of every sample, relative to the manifest's directory.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LABELS_FILE: &str = "labels.txt";

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn save(&self) -> Result<()> {
        let mut body = String::from("image,caption,mask,superpixel\n");
        for e in &self.entries {
            let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            let _ = writeln!(
                body,
                "{},{},{},{}",
                e.image.display(),
                e.caption.display(),
                opt(&e.mask),
                opt(&e.superpixel)
            );
        }
        let path = self.manifest_path();
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }

    /// Load and validate: every referenced file must exist, and masks must
    /// share their image's dimensions.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in body.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Data(format!(
                    "{}:{}: expected 4 fields, got {}",
                    path.display(),
                    lineno + 1,
                    fields.len()
                )));
            }
            let opt = |s: &str| (!s.is_empty()).then(|| PathBuf::from(s));
            entries.push(ManifestEntry {
                image: PathBuf::from(fields[0]),
                caption: PathBuf::from(fields[1]),
                mask: opt(fields[2]),
                superpixel: opt(fields[3]),
            });
        }
        if entries.is_empty() {
            return Err(Error::Data(format!("{}: no entries", path.display())));
        }
        let manifest = DatasetManifest { root: dir.to_path_buf(), entries };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            let mut required = vec![&e.image, &e.caption];
            if let Some(m) = &e.mask {
                required.push(m);
            }
            if let Some(s) = &e.superpixel {
                required.push(s);
            }
            for rel in required {
                let p = self.resolve(rel);
                if !p.is_file() {
                    return Err(Error::Data(format!("manifest references missing file {}", p.display())));
                }
            }
            if let Some(m) = &e.mask {
                let (_, iw, ih) = image_io::read_ppm(&self.resolve(&e.image))?;
                let (_, mw, mh) = image_io::read_pgm(&self.resolve(m))?;
                if (iw, ih) != (mw, mh) {
                    return Err(Error::Data(format!(
                        "mask {} is {mw}x{mh} but image is {iw}x{ih}",
                        m.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One fully loaded sample.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub pixels: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub caption: String,
    pub mask: Option<Vec<u8>>,
}

/// Read every sample of the manifest into memory (order preserved).
pub fn load_samples(manifest: &DatasetManifest) -> Result<Vec<LoadedSample>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let (pixels, width, height) = image_io::read_ppm(&manifest.resolve(&e.image))?;
            let caption_path = manifest.resolve(&e.caption);
            let caption = std::fs::read_to_string(&caption_path)
                .map_err(|err| Error::io(&caption_path, err))?
                .trim()
                .to_string();
            let mask = match &e.mask {
                Some(m) => Some(image_io::read_pgm(&manifest.resolve(m))?.0),
                None => None,
            };
            Ok(LoadedSample { pixels, width, height, caption, mask })
        })
        .collect()
}

struct PlacedShape {
    class_index: usize,
    cx: f64,
    cy: f64,
    r: f64,
}

fn covers(shape: &PlacedShape, kind: ShapeKind, x: usize, y: usize) -> bool {
    let (dx, dy) = (x as f64 - shape.cx, y as f64 - shape.cy);
    match kind {
        ShapeKind::Circle => dx * dx + dy * dy <= shape.r * shape.r,
        ShapeKind::Square => dx.abs() <= shape.r && dy.abs() <= shape.r,
        ShapeKind::Triangle => {
            // Upward triangle: apex (0,-r), base corners (±r, +r).
            if dy < -shape.r || dy > shape.r {
                return false;
            }
            let half_width = (dy + shape.r) / 2.0;
            dx.abs() <= half_width
        }
    }
}

/// Quadrant phrase for a shape center, so captions describe layout and stay
/// distinct across samples.
fn quadrant(cx: f64, cy: f64, size: usize) -> &'static str {
    let half = size as f64 / 2.0;
    match (cy < half, cx < half) {
        (true, true) => "at the top left",
        (true, false) => "at the top right",
        (false, true) => "at the bottom left",
        (false, false) => "at the bottom right",
    }
}

fn caption_for(parts: &[String]) -> String {
    match parts {
        [a] => format!("a photo of a {a}."),
        [a, b] => format!("a photo of a {a} and a {b}."),
        [a, b, c] => format!("a photo of a {a}, a {b} and a {c}."),
        _ => unreachable!("1..=3 shapes per image"),
    }
}

/// Generate `count` samples into `out_dir`, writing images, captions, masks,
/// the vocabulary, the label list, and the manifest. Returns the manifest.
pub fn generate_synthetic(
    out_dir: &Path,
    count: usize,
    seed: u64,
    classes: &[ShapeClass],
    image_size: usize,
) -> Result<DatasetManifest> {
    if classes.is_empty() {
        return Err(Error::InvalidConfig("need at least one class".into()));
    }
    if count == 0 {
        return Err(Error::InvalidConfig("count must be positive".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // Render every sample (parallel; each image derives its own stream).
    let rendered: Vec<(Vec<f64>, Vec<u8>, String)> = map_indexed(count, |i| {
        render_sample(seed, i, classes, image_size)
    });

    let mut entries = Vec::with_capacity(count);
    let mut captions = Vec::with_capacity(count);
    for (i, (pixels, mask, caption)) in rendered.iter().enumerate() {
        let image = PathBuf::from(format!("img_{i:04}.ppm"));
        let caption_path = PathBuf::from(format!("img_{i:04}.txt"));
        let mask_path = PathBuf::from(format!("img_{i:04}_mask.pgm"));
        image_io::write_ppm(&out_dir.join(&image), pixels, image_size, image_size)?;
        std::fs::write(out_dir.join(&caption_path), format!("{caption}\n"))
            .map_err(|e| Error::io(out_dir.join(&caption_path), e))?;
        image_io::write_pgm(&out_dir.join(&mask_path), mask, image_size, image_size)?;
        captions.push(caption.clone());
        entries.push(ManifestEntry {
            image,
            caption: caption_path,
            mask: Some(mask_path),
            superpixel: None,
        });
    }

    let vocab = Vocab::build(captions.iter().map(String::as_str));
    vocab.save(&out_dir.join(VOCAB_FILE))?;

    let labels: Vec<String> = classes.iter().map(|c| c.name.clone()).collect();
    std::fs::write(out_dir.join(LABELS_FILE), labels.join("\n") + "\n")
        .map_err(|e| Error::io(out_dir.join(LABELS_FILE), e))?;

    let manifest = DatasetManifest { root: out_dir.to_path_buf(), entries };
    manifest.save()?;
    Ok(manifest)
}

fn render_sample(
    seed: u64,
    index: usize,
    classes: &[ShapeClass],
    size: usize,
) -> (Vec<f64>, Vec<u8>, String) {
    let mut rng = Rng::stream(seed, index as u64);
    let bg = rng.range_f64(0.1, 0.4);
    let mut pixels = vec![bg; 3 * size * size];
    let mut mask = vec![255u8; size * size];

    let max_shapes = classes.len().min(3);
    let want = 1 + rng.below(max_shapes);
    let picks = rng.sample_without_replacement(classes.len(), want);

    let r_lo = (size as f64 / 8.0).max(3.0);
    let r_hi = (size as f64 / 5.0).max(r_lo + 1.0);
    let mut placed: Vec<PlacedShape> = Vec::new();
    for &class_index in &picks {
        // Bounding boxes must stay disjoint; give up after a fixed budget so
        // generation stays deterministic.
        for _attempt in 0..40 {
            let r = rng.range_f64(r_lo, r_hi);
            let cx = rng.range_f64(r + 1.0, size as f64 - r - 1.0);
            let cy = rng.range_f64(r + 1.0, size as f64 - r - 1.0);
            let clear = placed.iter().all(|p| {
                (p.cx - cx).abs() > p.r + r + 2.0 || (p.cy - cy).abs() > p.r + r + 2.0
            });
            if clear {
                placed.push(PlacedShape { class_index, cx, cy, r });
                break;
            }
        }
    }

    let plane = size * size;
    for shape in &placed {
        let class = &classes[shape.class_index];
        for y in 0..size {
            for x in 0..size {
                if covers(shape, class.kind, x, y) {
                    for c in 0..3 {
                        pixels[c * plane + y * size + x] = class.color[c];
                    }
                    mask[y * size + x] = shape.class_index as u8;
                }
            }
        }
    }

    let parts: Vec<String> = placed
        .iter()
        .map(|p| format!("{} {}", classes[p.class_index].name, quadrant(p.cx, p.cy, size)))
        .collect();
    (pixels, mask, caption_for(&parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("centerseg_{tag}_{}", std::process::id()));
        std::fs::remove_dir_all(&d).ok();
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn generates_count_triples_and_manifest_loads() {
        let dir = tmp_dir("gen");
        let classes = resolve_classes("", 2).unwrap();
        let manifest = generate_synthetic(&dir, 16, 7, &classes, 32).unwrap();
        assert_eq!(manifest.len(), 16);
        let loaded = DatasetManifest::load(&dir).unwrap();
        assert_eq!(loaded.len(), 16);
        assert!(dir.join(VOCAB_FILE).is_file());
        assert!(dir.join(LABELS_FILE).is_file());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let d1 = tmp_dir("gen_a");
        let d2 = tmp_dir("gen_b");
        let classes = resolve_classes("", 3).unwrap();
        generate_synthetic(&d1, 6, 99, &classes, 32).unwrap();
        generate_synthetic(&d2, 6, 99, &classes, 32).unwrap();
        for i in 0..6 {
            for suffix in ["img_{:04}.ppm", "img_{:04}.txt", "img_{:04}_mask.pgm"] {
                let name = suffix.replace("{:04}", &format!("{i:04}"));
                let a = std::fs::read(d1.join(&name)).unwrap();
                let b = std::fs::read(d2.join(&name)).unwrap();
                assert_eq!(a, b, "{name}");
            }
        }
        std::fs::remove_dir_all(&d1).ok();
        std::fs::remove_dir_all(&d2).ok();
    }

    #[test]
    fn caption_and_mask_classes_agree() {
        let dir = tmp_dir("gen_consistency");
        let classes = resolve_classes("", 3).unwrap();
        let manifest = generate_synthetic(&dir, 12, 3, &classes, 32).unwrap();
        let samples = load_samples(&manifest).unwrap();
        for s in &samples {
            let mask = s.mask.as_ref().unwrap();
            let mut in_mask: Vec<usize> = mask.iter().filter(|&&v| v != 255).map(|&v| v as usize).collect();
            in_mask.sort_unstable();
            in_mask.dedup();
            for (idx, class) in classes.iter().enumerate() {
                let in_caption = s.caption.contains(&class.name);
                assert_eq!(
                    in_caption,
                    in_mask.contains(&idx),
                    "caption `{}` vs mask classes {in_mask:?}",
                    s.caption
                );
            }
            assert!(!in_mask.is_empty());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_file_fails_validation() {
        let dir = tmp_dir("gen_missing");
        let classes = resolve_classes("", 2).unwrap();
        generate_synthetic(&dir, 2, 1, &classes, 32).unwrap();
        std::fs::remove_file(dir.join("img_0001.ppm")).unwrap();
        assert!(DatasetManifest::load(&dir).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_class_name_rejected() {
        assert!(resolve_classes("purple dodecahedron", 2).is_err());
        let two = resolve_classes("green triangle,red circle", 2).unwrap();
        assert_eq!(two[0].name, "green triangle");
        assert_eq!(two[1].name, "red circle");
    }
}
