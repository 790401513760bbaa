//! Command-line surface: synthetic data generation, superpixel caching,
//! training, evaluation, ablation sweeps, and checkpoint inspection.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use centerseg_core::checkpoint::{inspect, load_checkpoint};
use centerseg_core::config::ModelConfig;
use centerseg_core::data::{generate_synthetic, resolve_classes, DatasetManifest};
use centerseg_core::train::{
    ensure_superpixel_caches, evaluate, evaluate_with_baseline, superpixel_stats, sweep,
    sweep_grid, train, EvalOptions, TrainOptions,
};

#[derive(Parser)]
#[command(name = "centerseg", version, about = "Contrastive vision-language training with learnable-center patch grouping, plus open-vocabulary segmentation inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration file plus per-key overrides. Overrides win over the file,
/// which wins over the built-in desk-scale defaults.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// Flat `key = value` config file; `#` comments allowed.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers_text: Option<usize>,
    #[arg(long)]
    layers_image: Option<usize>,
    #[arg(long)]
    plug_layer: Option<usize>,
    #[arg(long)]
    cross_attn_depth: Option<usize>,
    #[arg(long)]
    centers: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    max_text_len: Option<usize>,
    #[arg(long)]
    mask_rate: Option<f64>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    gumbel_temperature: Option<f64>,
    #[arg(long)]
    sp_sigma: Option<f64>,
    #[arg(long)]
    sp_k: Option<f64>,
    #[arg(long)]
    sp_min_size: Option<usize>,
    #[arg(long)]
    enable_rec: Option<bool>,
    #[arg(long)]
    enable_sup: Option<bool>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    lr_pretrained: Option<f64>,
    #[arg(long)]
    lr_fresh: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mask_loss_masked_only: Option<bool>,
}

impl ConfigArgs {
    fn build(&self) -> anyhow::Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => ModelConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ModelConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        apply!(
            hidden, heads, layers_text, layers_image, plug_layer, cross_attn_depth, centers,
            patch_size, image_size, max_text_len, mask_rate, decoder_layers, gumbel_temperature,
            sp_sigma, sp_k, sp_min_size, enable_rec, enable_sup, threshold, lr_pretrained,
            lr_fresh, batch_size, epochs, seed, mask_loss_masked_only
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape dataset with captions and masks.
    GenData {
        /// Output directory for images, captions, masks, and the manifest.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Comma-separated palette class names; empty takes the first two.
        #[arg(long, default_value = "")]
        classes: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Build superpixel caches for every sample of a dataset.
    Superpixel {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on a dataset; writes metrics.csv and model.ckpt.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint trained with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Checkpoint every N steps.
        #[arg(long)]
        save_every: Option<u64>,
        /// Stop after N steps (resumable).
        #[arg(long)]
        max_steps: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Segment a dataset with a checkpoint and report mIoU.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Dump predictions and the report CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Background threshold override; -1 disables background entirely.
        #[arg(long, allow_negative_numbers = true)]
        threshold: Option<f64>,
        /// Comma-separated label names; defaults to the dataset label file.
        #[arg(long)]
        labels: Option<String>,
        /// Score the ground truth against itself (harness check).
        #[arg(long)]
        self_check: bool,
        /// Leave background out of the mean.
        #[arg(long)]
        exclude_background: bool,
        /// Also report the spatial-shuffle chance baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Train/evaluate a grid of configurations; one CSV row per cell.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated plug layers (default: config value).
        #[arg(long, default_value = "")]
        plug_layers: String,
        /// Comma-separated center counts.
        #[arg(long, default_value = "")]
        centers_list: String,
        /// Comma-separated cross-attention depths.
        #[arg(long, default_value = "")]
        cross_attn: String,
        /// Comma-separated loss sets from: con, con+rec, con+sup, con+rec+sup.
        #[arg(long, default_value = "")]
        losses: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print checkpoint metadata and parameter shapes.
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn parse_usize_list(spec: &str, fallback: usize) -> anyhow::Result<Vec<usize>> {
    if spec.trim().is_empty() {
        return Ok(vec![fallback]);
    }
    spec.split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad list entry `{s}`")))
        .collect()
}

fn parse_loss_sets(spec: &str, fallback: (bool, bool)) -> anyhow::Result<Vec<(bool, bool)>> {
    if spec.trim().is_empty() {
        return Ok(vec![fallback]);
    }
    spec.split(',')
        .map(|s| match s.trim() {
            "con" => Ok((false, false)),
            "con+rec" => Ok((true, false)),
            "con+sup" => Ok((false, true)),
            "con+rec+sup" => Ok((true, true)),
            other => bail!("unknown loss set `{other}` (use con, con+rec, con+sup, con+rec+sup)"),
        })
        .collect()
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::GenData { out, count, classes, cfg } => {
            let cfg = cfg.build()?;
            let classes = resolve_classes(&classes, 2)?;
            let manifest = generate_synthetic(&out, count, cfg.seed, &classes, cfg.image_size)?;
            println!(
                "wrote {} samples ({} classes, {}x{} px) to {}",
                manifest.len(),
                classes.len(),
                cfg.image_size,
                cfg.image_size,
                out.display()
            );
        }
        Command::Superpixel { data, cfg } => {
            let cfg = cfg.build()?;
            let mut manifest = DatasetManifest::load(&data)?;
            let built = ensure_superpixel_caches(&mut manifest, &cfg)?;
            let (avg_segments, aliasing) = superpixel_stats(&manifest, cfg.patch_size)?;
            println!(
                "superpixel caches: {built} built, {} total; avg {avg_segments:.2} segments/image, label aliasing rate {aliasing:.4}",
                manifest.len()
            );
        }
        Command::Train { data, out, resume, save_every, max_steps, cfg } => {
            let cfg = cfg.build()?;
            let report = train(&cfg, &data, &out, &TrainOptions { resume, save_every, max_steps })?;
            println!(
                "trained {} steps: total loss {} -> {} (con {} -> {})",
                report.steps_run, report.first.total, report.last.total, report.first.con, report.last.con
            );
            println!("metrics: {}", report.metrics_path.display());
            println!("checkpoint: {}", report.checkpoint_path.display());
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            threshold,
            labels,
            self_check,
            exclude_background,
            baseline,
        } => {
            let (model, state) = load_checkpoint(&checkpoint)?;
            let manifest = DatasetManifest::load(&data)?;
            let opts = EvalOptions {
                threshold,
                labels: labels.map(|l| l.split(',').map(|s| s.trim().to_string()).collect()),
                dump_dir: out,
                self_check,
                include_background: !exclude_background,
            };
            if baseline {
                let (report, chance) =
                    evaluate_with_baseline(&model, &manifest, &opts, 8, model.config.seed)?;
                print!("{}", report.report.to_csv());
                println!("permutation baseline mIoU: {chance}");
                println!(
                    "mIoU {} over {} images (checkpoint step {})",
                    report.report.miou, report.num_images, state.step
                );
            } else {
                let report = evaluate(&model, &manifest, &opts)?;
                print!("{}", report.report.to_csv());
                println!(
                    "mIoU {} over {} images (checkpoint step {})",
                    report.report.miou, report.num_images, state.step
                );
            }
        }
        Command::Sweep { data, out, plug_layers, centers_list, cross_attn, losses, cfg } => {
            let cfg = cfg.build()?;
            let cells = sweep_grid(
                &parse_usize_list(&plug_layers, cfg.plug_layer)?,
                &parse_usize_list(&centers_list, cfg.centers)?,
                &parse_usize_list(&cross_attn, cfg.cross_attn_depth)?,
                &parse_loss_sets(&losses, (cfg.enable_rec, cfg.enable_sup))?,
            );
            println!("sweeping {} cells into {}", cells.len(), out.display());
            let rows = sweep(&cfg, &data, &out, &cells)?;
            for (i, row) in rows.iter().enumerate() {
                match (&row.miou, &row.error) {
                    (Some(m), _) => println!("cell {i:02}: mIoU {m}"),
                    (None, Some(e)) => println!("cell {i:02}: failed: {e}"),
                    _ => unreachable!(),
                }
            }
            println!("rows: {}", out.join("sweep.csv").display());
        }
        Command::InspectCheckpoint { checkpoint } => {
            let info = inspect(&checkpoint)?;
            println!("version: {}", info.version);
            println!("step: {}", info.step);
            println!("adam updates: {}", info.adam_t);
            println!("rng state: {:#x}", info.rng_state);
            println!("vocab size: {}", info.vocab_size);
            println!("parameters: {} tensors, {} values", info.params.len(), info.total_values);
            for (name, shape) in &info.params {
                println!("  {name} {shape:?}");
            }
            println!("config:\n{}", info.config_text);
        }
    }
    Ok(())
}
