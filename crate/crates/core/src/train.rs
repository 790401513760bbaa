//! Training loop, evaluation harness, superpixel cache management, and the
//! ablation sweep.
//!
//! Each step samples a batch, builds every enabled loss on one tape, runs
//! one backward pass, and applies Adam with a cosine schedule and two
//! learning-rate groups. All randomness flows through a single checkpointed
//! generator, so a resumed run continues the interrupted one exactly and two
//! runs with one seed produce byte-identical metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, save_checkpoint, TrainState};
use crate::config::ModelConfig;
use crate::data::{load_samples, DatasetManifest, LoadedSample, LABELS_FILE, VOCAB_FILE};
use crate::error::{Error, Result};
use crate::infer::{
    label_features, permutation_baseline, segment_image, IoUAccumulator, IoUReport, LabelSet,
};
use crate::losses::LossBreakdown;
use crate::model::{lr_group, ForwardOpts, LrGroup, Model, TrainBatch};
use crate::parallel::map_indexed;
use crate::rng::Rng;
use crate::superpixel::{segment_image as superpixel_segment, PatchGroups, SuperpixelLabeling};
use crate::tensor::{adam_step, cosine_schedule, AdamConfig};
use crate::text::{TextBatch, Vocab};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_HEADER: &str = "step,con,rec,sup,total,lr_pretrained,lr_fresh";

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Write an intermediate checkpoint every this many steps.
    pub save_every: Option<u64>,
    /// Stop after this many steps even if the schedule has more; the saved
    /// checkpoint resumes the remainder under the same configuration.
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps_run: u64,
    pub first: LossBreakdown,
    pub last: LossBreakdown,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Compute any missing superpixel caches next to their images and point the
/// manifest at them. Returns how many were built.
pub fn ensure_superpixel_caches(manifest: &mut DatasetManifest, cfg: &ModelConfig) -> Result<usize> {
    let todo: Vec<usize> = (0..manifest.len())
        .filter(|&i| manifest.entries[i].superpixel.is_none())
        .collect();
    if todo.is_empty() {
        return Ok(0);
    }
    let built: Vec<Result<PathBuf>> = map_indexed(todo.len(), |slot| {
        let i = todo[slot];
        let entry = &manifest.entries[i];
        let (pixels, w, h) = crate::image_io::read_ppm(&manifest.resolve(&entry.image))?;
        let labeling = superpixel_segment(&pixels, w, h, cfg.sp_sigma, cfg.sp_k, cfg.sp_min_size)?;
        let rel = entry.image.with_extension("sp");
        labeling.save(&manifest.resolve(&rel))?;
        Ok(rel)
    });
    for (slot, res) in built.into_iter().enumerate() {
        manifest.entries[todo[slot]].superpixel = Some(res?);
    }
    manifest.save()?;
    Ok(todo.len())
}

/// Mean segment count and floor-of-mean label aliasing rate over a dataset.
pub fn superpixel_stats(manifest: &DatasetManifest, patch_size: usize) -> Result<(f64, f64)> {
    let mut segs = 0.0;
    let mut alias = 0.0;
    let mut n = 0usize;
    for e in &manifest.entries {
        let Some(sp) = &e.superpixel else { continue };
        let labeling = SuperpixelLabeling::load(&manifest.resolve(sp))?;
        segs += labeling.num_segments as f64;
        alias += labeling.label_aliasing_rate(patch_size)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("no superpixel caches in manifest".into()));
    }
    Ok((segs / n as f64, alias / n as f64))
}

fn load_groups(manifest: &DatasetManifest, cfg: &ModelConfig) -> Result<Vec<PatchGroups>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let sp = e.superpixel.as_ref().ok_or_else(|| {
                Error::Data(format!("{} has no superpixel cache", e.image.display()))
            })?;
            let labeling = SuperpixelLabeling::load(&manifest.resolve(sp))?;
            labeling.super_patch_groups(cfg.patch_size)
        })
        .collect()
}

/// Load the dataset vocabulary, building and saving it from the captions if
/// the file does not exist yet.
pub fn dataset_vocab(data_dir: &Path, samples: &[LoadedSample]) -> Result<Vocab> {
    let path = data_dir.join(VOCAB_FILE);
    if path.is_file() {
        return Vocab::load(&path);
    }
    let vocab = Vocab::build(samples.iter().map(|s| s.caption.as_str()));
    vocab.save(&path)?;
    Ok(vocab)
}

fn check_sample_dims(samples: &[LoadedSample], cfg: &ModelConfig) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if s.width != cfg.image_size || s.height != cfg.image_size {
            return Err(Error::Data(format!(
                "sample {i} is {}x{}, config expects {0}x{0} images sized {2}",
                s.width, s.height, cfg.image_size
            )));
        }
    }
    Ok(())
}

pub fn train(cfg: &ModelConfig, data_dir: &Path, out_dir: &Path, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut manifest = DatasetManifest::load(data_dir)?;
    if cfg.enable_sup {
        ensure_superpixel_caches(&mut manifest, cfg)?;
    }
    let samples = load_samples(&manifest)?;
    check_sample_dims(&samples, cfg)?;
    let groups = if cfg.enable_sup { Some(load_groups(&manifest, cfg)?) } else { None };

    let (mut model, mut state) = match &opts.resume {
        Some(ckpt) => {
            let (model, state) = load_checkpoint(ckpt)?;
            if model.config != *cfg {
                return Err(Error::InvalidConfig(
                    "resume requires the exact configuration the checkpoint was trained with".into(),
                ));
            }
            (model, state)
        }
        None => {
            let vocab = dataset_vocab(data_dir, &samples)?;
            (Model::new(cfg.clone(), vocab)?, TrainState { step: 0, rng: Rng::new(cfg.seed) })
        }
    };

    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    if state.step >= total_steps {
        return Err(Error::Usage(format!(
            "checkpoint already at step {} of {total_steps}",
            state.step
        )));
    }

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = if opts.resume.is_some() && metrics_path.is_file() {
        std::fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?
    } else {
        format!("{METRICS_HEADER}\n")
    };

    let texts: Vec<&str> = samples.iter().map(|s| s.caption.as_str()).collect();
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    let adam = AdamConfig::default();
    let batch_size = cfg.batch_size.min(samples.len());
    let mut first = None;
    let mut last = LossBreakdown::new(0.0, 0.0, 0.0);
    let start_step = state.step;
    let stop_at = match opts.max_steps {
        Some(m) => total_steps.min(start_step + m),
        None => total_steps,
    };

    while state.step < stop_at {
        let step = state.step + 1;
        let lr_p = cosine_schedule(state.step, total_steps, cfg.lr_pretrained);
        let lr_f = cosine_schedule(state.step, total_steps, cfg.lr_fresh);

        let picks = state.rng.sample_without_replacement(samples.len(), batch_size);
        let sub_texts: Vec<&str> = picks.iter().map(|&i| texts[i]).collect();
        let text = TextBatch::new(&sub_texts, &model.vocab, cfg.max_text_len)?;
        let images: Vec<&[f64]> = picks.iter().map(|&i| samples[i].pixels.as_slice()).collect();
        let batch_groups = groups
            .as_ref()
            .map(|g| picks.iter().map(|&i| &g[i]).collect::<Vec<_>>());
        let batch = TrainBatch { text: &text, images, groups: batch_groups };

        model.params.zero_grads();
        let out = model.train_step(&batch, &mut state.rng, ForwardOpts::training(cfg))?;
        if !out.breakdown.is_finite() {
            let offender = out
                .per_sample
                .iter()
                .position(|(r, s)| !r.is_finite() || !s.is_finite())
                .unwrap_or(0);
            return Err(Error::NanLoss {
                step,
                detail: format!(
                    "losses {:?}; first non-finite batch position {offender} (dataset sample {})",
                    out.breakdown, picks[offender]
                ),
            });
        }

        model.params.adam_t += 1;
        let t = model.params.adam_t;
        let plug = cfg.plug_layer;
        for (name, p) in model.params.iter_mut() {
            let lr = match lr_group(name, plug) {
                LrGroup::Pretrained => lr_p,
                LrGroup::Fresh => lr_f,
            };
            adam_step(p, lr, adam, t);
        }
        model.clamp_logit_scale();

        let b = out.breakdown;
        let _ = writeln!(metrics, "{step},{},{},{},{},{lr_p},{lr_f}", b.con, b.rec, b.sup, b.total);
        state.step = step;
        if first.is_none() {
            first = Some(b);
        }
        last = b;

        if let Some(every) = opts.save_every {
            if step % every == 0 && step < total_steps {
                save_checkpoint(&checkpoint_path, &model, &state)?;
                std::fs::write(&metrics_path, &metrics).map_err(|e| Error::io(&metrics_path, e))?;
            }
        }
    }

    save_checkpoint(&checkpoint_path, &model, &state)?;
    std::fs::write(&metrics_path, &metrics).map_err(|e| Error::io(&metrics_path, e))?;

    Ok(TrainReport {
        steps_run: state.step - start_step,
        first: first.expect("at least one step ran"),
        last,
        metrics_path,
        checkpoint_path,
    })
}

// ── evaluation ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Override the config threshold.
    pub threshold: Option<f64>,
    /// Override the dataset's label list.
    pub labels: Option<Vec<String>>,
    /// Dump color-coded predictions and the report CSV here.
    pub dump_dir: Option<PathBuf>,
    /// Score the ground truth against itself (harness self-check).
    pub self_check: bool,
    pub include_background: bool,
}

impl EvalOptions {
    pub fn new() -> Self {
        EvalOptions { include_background: true, ..Default::default() }
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub report: IoUReport,
    pub num_images: usize,
    pub labels: Vec<String>,
}

pub fn dataset_labels(data_dir: &Path) -> Result<Vec<String>> {
    let path = data_dir.join(LABELS_FILE);
    let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(body.lines().map(str::to_string).filter(|l| !l.trim().is_empty()).collect())
}

/// Segment every image and aggregate the per-class counters. Per-image work
/// runs data-parallel; counters merge in index order.
pub fn evaluate(model: &Model, manifest: &DatasetManifest, opts: &EvalOptions) -> Result<EvalReport> {
    let samples = load_samples(manifest)?;
    check_sample_dims(&samples, &model.config)?;
    let label_names = match &opts.labels {
        Some(l) => l.clone(),
        None => dataset_labels(&manifest.root)?,
    };
    let labels = LabelSet::new(label_names.clone())?;
    let feats = label_features(model, &labels)?;
    let threshold = opts.threshold.unwrap_or(model.config.threshold);

    let preds_and_gts: Vec<Result<(Vec<i32>, Vec<i32>)>> = map_indexed(samples.len(), |i| {
        let s = &samples[i];
        let gt = s
            .mask
            .as_ref()
            .map(|m| crate::infer::mask_to_classes(m))
            .ok_or_else(|| Error::Data(format!("sample {i} has no ground-truth mask")))?;
        let pred = if opts.self_check {
            gt.clone()
        } else {
            segment_image(model, &s.pixels, &feats, threshold)?.pixel_classes
        };
        Ok((pred, gt))
    });

    let mut acc = IoUAccumulator::new(labels.len(), opts.include_background);
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for r in preds_and_gts {
        let (pred, gt) = r?;
        acc.add(&pred, &gt)?;
        preds.push(pred);
        gts.push(gt);
    }
    let report = acc.report();

    if let Some(dir) = &opts.dump_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, pred) in preds.iter().enumerate() {
            let base = dir.join(format!("pred_{i:04}"));
            crate::infer::dump_prediction(&base, pred, samples[i].width, samples[i].height, &labels)?;
        }
        let csv_path = dir.join("iou_report.csv");
        std::fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    }

    Ok(EvalReport { report, num_images: samples.len(), labels: label_names })
}

/// Evaluation plus the spatial-shuffle chance baseline on the same
/// predictions.
pub fn evaluate_with_baseline(
    model: &Model,
    manifest: &DatasetManifest,
    opts: &EvalOptions,
    reps: usize,
    seed: u64,
) -> Result<(EvalReport, f64)> {
    let samples = load_samples(manifest)?;
    let label_names = match &opts.labels {
        Some(l) => l.clone(),
        None => dataset_labels(&manifest.root)?,
    };
    let labels = LabelSet::new(label_names.clone())?;
    let feats = label_features(model, &labels)?;
    let threshold = opts.threshold.unwrap_or(model.config.threshold);

    let pairs: Vec<Result<(Vec<i32>, Vec<i32>)>> = map_indexed(samples.len(), |i| {
        let s = &samples[i];
        let gt = s
            .mask
            .as_ref()
            .map(|m| crate::infer::mask_to_classes(m))
            .ok_or_else(|| Error::Data(format!("sample {i} has no ground-truth mask")))?;
        let pred = segment_image(model, &s.pixels, &feats, threshold)?.pixel_classes;
        Ok((pred, gt))
    });
    let mut acc = IoUAccumulator::new(labels.len(), opts.include_background);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for r in pairs {
        let (p, g) = r?;
        acc.add(&p, &g)?;
        preds.push(p);
        gts.push(g);
    }
    let mut rng = Rng::new(seed ^ 0xBA5E_1234);
    let baseline =
        permutation_baseline(&preds, &gts, labels.len(), opts.include_background, reps, &mut rng)?;
    Ok((
        EvalReport { report: acc.report(), num_images: samples.len(), labels: label_names },
        baseline,
    ))
}

// ── sweep ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepCell {
    pub plug_layer: usize,
    pub centers: usize,
    pub cross_attn_depth: usize,
    pub enable_rec: bool,
    pub enable_sup: bool,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub miou: Option<f64>,
    pub error: Option<String>,
}

/// Cross product of the swept axes. Loss sets are `(enable_rec, enable_sup)`
/// pairs.
pub fn sweep_grid(
    plug_layers: &[usize],
    centers: &[usize],
    cross_depths: &[usize],
    loss_sets: &[(bool, bool)],
) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for &p in plug_layers {
        for &c in centers {
            for &d in cross_depths {
                for &(rec, sup) in loss_sets {
                    cells.push(SweepCell {
                        plug_layer: p,
                        centers: c,
                        cross_attn_depth: d,
                        enable_rec: rec,
                        enable_sup: sup,
                    });
                }
            }
        }
    }
    cells
}

pub const SWEEP_HEADER: &str = "plug_layer,centers,cross_attn_depth,enable_rec,enable_sup,miou,status";

/// Train and evaluate one configuration per cell. A failing cell records its
/// error and the sweep continues. Results land in `sweep.csv` under
/// `out_dir`, one row per cell in grid order.
pub fn sweep(
    base: &ModelConfig,
    data_dir: &Path,
    out_dir: &Path,
    cells: &[SweepCell],
) -> Result<Vec<SweepRow>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.plug_layer = cell.plug_layer;
        cfg.centers = cell.centers;
        cfg.cross_attn_depth = cell.cross_attn_depth;
        cfg.enable_rec = cell.enable_rec;
        cfg.enable_sup = cell.enable_sup;
        let cell_dir = out_dir.join(format!("cell_{i:02}"));
        let outcome = run_cell(&cfg, data_dir, &cell_dir);
        rows.push(match outcome {
            Ok(miou) => SweepRow { cell: cell.clone(), miou: Some(miou), error: None },
            Err(e) => SweepRow { cell: cell.clone(), miou: None, error: Some(e.to_string()) },
        });
    }

    let mut csv = format!("{SWEEP_HEADER}\n");
    for row in &rows {
        let c = &row.cell;
        let miou = row.miou.map(|m| m.to_string()).unwrap_or_default();
        let status = match &row.error {
            None => "ok".to_string(),
            Some(e) => format!("error: {}", e.replace(',', ";")),
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{miou},{status}",
            c.plug_layer, c.centers, c.cross_attn_depth, c.enable_rec, c.enable_sup
        );
    }
    let csv_path = out_dir.join("sweep.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(rows)
}

fn run_cell(cfg: &ModelConfig, data_dir: &Path, cell_dir: &Path) -> Result<f64> {
    let report = train(cfg, data_dir, cell_dir, &TrainOptions::default())?;
    let (model, _) = load_checkpoint(&report.checkpoint_path)?;
    let manifest = DatasetManifest::load(data_dir)?;
    let eval = evaluate(&model, &manifest, &EvalOptions::new())?;
    Ok(eval.report.miou)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, resolve_classes};

    fn quick_cfg() -> ModelConfig {
        ModelConfig {
            hidden: 16,
            heads: 2,
            layers_text: 1,
            layers_image: 2,
            plug_layer: 1,
            cross_attn_depth: 1,
            centers: 3,
            patch_size: 8,
            image_size: 32,
            max_text_len: 12,
            decoder_layers: 1,
            batch_size: 4,
            epochs: 2,
            sp_min_size: 8,
            seed: 11,
            ..Default::default()
        }
    }

    fn fresh_dataset(tag: &str, count: usize, cfg: &ModelConfig) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("centerseg_train_{tag}_{}", std::process::id()));
        std::fs::remove_dir_all(&dir).ok();
        let classes = resolve_classes("", 2).unwrap();
        generate_synthetic(&dir, count, 5, &classes, cfg.image_size).unwrap();
        dir
    }

    #[test]
    fn one_step_writes_metrics_row() {
        let mut cfg = quick_cfg();
        cfg.epochs = 1;
        cfg.batch_size = 4;
        let data = fresh_dataset("one_step", 4, &cfg);
        let out = data.join("run");
        let report = train(&cfg, &data, &out, &TrainOptions::default()).unwrap();
        assert_eq!(report.steps_run, 1);
        let metrics = std::fs::read_to_string(report.metrics_path).unwrap();
        let lines: Vec<&str> = metrics.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].split(',').count(), 7);
        std::fs::remove_dir_all(&data).ok();
    }

    #[test]
    fn metrics_are_deterministic_across_runs() {
        let cfg = quick_cfg();
        let data = fresh_dataset("determinism", 4, &cfg);
        let m1 = {
            let report = train(&cfg, &data, &data.join("run1"), &TrainOptions::default()).unwrap();
            std::fs::read(report.metrics_path).unwrap()
        };
        let m2 = {
            let report = train(&cfg, &data, &data.join("run2"), &TrainOptions::default()).unwrap();
            std::fs::read(report.metrics_path).unwrap()
        };
        assert_eq!(m1, m2);
        std::fs::remove_dir_all(&data).ok();
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mut cfg = quick_cfg();
        cfg.epochs = 6; // 6 steps at batch 4 over 4 samples
        cfg.enable_rec = false;
        cfg.enable_sup = false;
        let data = fresh_dataset("resume", 4, &cfg);

        let full = train(&cfg, &data, &data.join("full"), &TrainOptions::default()).unwrap();

        // Interrupt after 3 of 6 steps, then resume the remainder.
        train(
            &cfg,
            &data,
            &data.join("half"),
            &TrainOptions { max_steps: Some(3), ..Default::default() },
        )
        .unwrap();
        let resumed = train(
            &cfg,
            &data,
            &data.join("resumed"),
            &TrainOptions {
                resume: Some(data.join("half").join(CHECKPOINT_FILE)),
                ..Default::default()
            },
        )
        .unwrap();

        let rel = (full.last.total - resumed.last.total).abs() / full.last.total.abs().max(1e-300);
        assert!(rel < 1e-10, "full {} vs resumed {}", full.last.total, resumed.last.total);
        std::fs::remove_dir_all(&data).ok();
    }

    #[test]
    fn resume_rejects_config_changes() {
        let cfg = quick_cfg();
        let data = fresh_dataset("resume_cfg", 4, &cfg);
        train(&cfg, &data, &data.join("first"), &TrainOptions::default()).unwrap();
        let mut changed = cfg.clone();
        changed.centers = 4;
        changed.epochs = 4;
        let err = train(
            &changed,
            &data,
            &data.join("second"),
            &TrainOptions { resume: Some(data.join("first").join(CHECKPOINT_FILE)), ..Default::default() },
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
        std::fs::remove_dir_all(&data).ok();
    }

    #[test]
    fn superpixel_cache_audit() {
        // Disabled consistency loss never touches the cache files.
        let mut cfg = quick_cfg();
        cfg.enable_sup = false;
        cfg.enable_rec = false;
        cfg.epochs = 1;
        let data = fresh_dataset("audit_off", 4, &cfg);
        train(&cfg, &data, &data.join("run"), &TrainOptions::default()).unwrap();
        let sp_files = std::fs::read_dir(&data)
            .unwrap()
            .filter(|e| {
                e.as_ref().unwrap().path().extension().map(|x| x == "sp").unwrap_or(false)
            })
            .count();
        assert_eq!(sp_files, 0, "cache written despite enable_sup = false");
        std::fs::remove_dir_all(&data).ok();

        // Enabled loss builds the caches lazily and registers them.
        let mut cfg = quick_cfg();
        cfg.enable_sup = true;
        cfg.enable_rec = false;
        cfg.epochs = 1;
        let data = fresh_dataset("audit_on", 4, &cfg);
        train(&cfg, &data, &data.join("run"), &TrainOptions::default()).unwrap();
        let manifest = DatasetManifest::load(&data).unwrap();
        assert!(manifest.entries.iter().all(|e| e.superpixel.is_some()));
        std::fs::remove_dir_all(&data).ok();
    }

    #[test]
    fn loss_decreases_over_fifty_steps() {
        let mut cfg = quick_cfg();
        cfg.enable_rec = false;
        cfg.enable_sup = false;
        cfg.epochs = 50;
        cfg.batch_size = 4;
        cfg.lr_pretrained = 3e-3;
        cfg.lr_fresh = 3e-3;
        let data = fresh_dataset("fifty", 4, &cfg);
        let report = train(&cfg, &data, &data.join("run"), &TrainOptions::default()).unwrap();
        assert!(
            report.last.total < report.first.total,
            "loss went {} -> {}",
            report.first.total,
            report.last.total
        );
        std::fs::remove_dir_all(&data).ok();
    }

    #[test]
    fn self_check_eval_scores_perfect() {
        let cfg = quick_cfg();
        let data = fresh_dataset("selfcheck", 4, &cfg);
        let model = {
            let vocab = Vocab::build(["a red circle.", "a blue square."]);
            Model::new(cfg.clone(), vocab).unwrap()
        };
        let manifest = DatasetManifest::load(&data).unwrap();
        let mut opts = EvalOptions::new();
        opts.self_check = true;
        let report = evaluate(&model, &manifest, &opts).unwrap();
        assert_eq!(report.report.miou, 1.0);
        std::fs::remove_dir_all(&data).ok();
    }

    #[test]
    fn evaluation_is_deterministic() {
        let cfg = quick_cfg();
        let data = fresh_dataset("eval_det", 3, &cfg);
        let vocab = Vocab::build(["a red circle.", "a blue square."]);
        let model = Model::new(cfg.clone(), vocab).unwrap();
        let manifest = DatasetManifest::load(&data).unwrap();
        let a = evaluate(&model, &manifest, &EvalOptions::new()).unwrap();
        let b = evaluate(&model, &manifest, &EvalOptions::new()).unwrap();
        assert_eq!(a.report.miou, b.report.miou);
        std::fs::remove_dir_all(&data).ok();
    }

    #[test]
    fn sweep_emits_one_row_per_cell() {
        let mut cfg = quick_cfg();
        cfg.epochs = 1;
        cfg.enable_rec = false;
        cfg.enable_sup = false;
        let data = fresh_dataset("sweep", 4, &cfg);
        let cells = sweep_grid(&[1], &[2, 3], &[0], &[(false, false)]);
        assert_eq!(cells.len(), 2);
        let rows = sweep(&cfg, &data, &data.join("sweep_out"), &cells).unwrap();
        assert_eq!(rows.len(), 2);
        let csv = std::fs::read_to_string(data.join("sweep_out").join("sweep.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SWEEP_HEADER);
        assert_eq!(lines.len(), 3);
        // Cell config echoes into its row.
        assert!(lines[1].starts_with("1,2,0,false,false,"));
        assert!(lines[2].starts_with("1,3,0,false,false,"));
        for row in &rows {
            assert!(row.miou.unwrap().is_finite());
        }
        std::fs::remove_dir_all(&data).ok();
    }
}
