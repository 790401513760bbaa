//! Full model assembly: parameter initialization, the training forward pass
//! producing all enabled losses on one tape, the masked reconstruction
//! branch, eval-mode image encoding, and the learning-rate group partition.

use crate::config::ModelConfig;
use crate::encoder::{
    self, embed_patches, encode_text_sample, image_stage1, image_stage3, init_encoder_params,
    init_matrix_std, init_zeros, layer_norm_named, patchify, transformer_block, unpatchify,
    RECON_STD,
};
use crate::error::{Error, Result};
use crate::group::{self, group_patches, MappingMatrix};
use crate::losses::{contrastive_loss, plan_mask, superpixel_kl_loss, LossBreakdown, MaskPlan};
use crate::parallel::{map_indexed, try_for_each_mut};
use crate::rng::Rng;
use crate::superpixel::PatchGroups;
use crate::tensor::{Graph, NodeId, ParamStore, Tensor};
use crate::text::{TextBatch, Vocab};

/// Initial learnable similarity scale, 1/0.07.
pub const LOGIT_SCALE_INIT: f64 = 1.0 / 0.07;
/// The scale is clamped into this range after every optimizer step.
pub const LOGIT_SCALE_MAX: f64 = 100.0;
pub const LOGIT_SCALE_MIN: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
}

/// Forward-pass switches.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    pub training: bool,
    /// Pool with the soft assignment instead of the hard one. The forward
    /// then matches its own gradient everywhere the argmax does not flip,
    /// which is what a finite-difference check needs; normal training keeps
    /// the hard path with its straight-through gradient.
    pub soft_assignment: bool,
    pub enable_con: bool,
    pub enable_rec: bool,
    pub enable_sup: bool,
}

impl ForwardOpts {
    pub fn training(cfg: &ModelConfig) -> Self {
        ForwardOpts {
            training: true,
            soft_assignment: false,
            enable_con: true,
            enable_rec: cfg.enable_rec,
            enable_sup: cfg.enable_sup,
        }
    }

    pub fn eval() -> Self {
        ForwardOpts {
            training: false,
            soft_assignment: false,
            enable_con: true,
            enable_rec: false,
            enable_sup: false,
        }
    }
}

/// One training batch, all samples already loaded.
pub struct TrainBatch<'a> {
    pub text: &'a TextBatch,
    /// Per-sample channel-major pixels, `3·image_size²` each.
    pub images: Vec<&'a [f64]>,
    /// Super-patch groups per sample; required when the consistency loss is
    /// enabled.
    pub groups: Option<Vec<&'a PatchGroups>>,
}

/// One sample's forward tape plus the handles the step stitches together.
/// Samples are independent up to the contrastive loss, so these build and
/// run backward in parallel.
pub struct SampleForward {
    pub graph: Graph,
    /// Text feature row, `[1×H]`.
    pub text_row: NodeId,
    /// Pooled image feature row, `[1×H]`.
    pub image_row: NodeId,
    pub rec: Option<NodeId>,
    pub sup: Option<NodeId>,
}

/// Evaluated losses of one step.
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    /// Per-sample (rec, sup) values for divergence diagnostics.
    pub per_sample: Vec<(f64, f64)>,
}

/// Eval-mode encoding of one image.
pub struct ImageEncoding {
    /// Region features `[L×H]` after the final image block and norm.
    pub regions: NodeId,
    /// Columnwise max over regions, `[1×H]`.
    pub pooled: NodeId,
    pub mapping: MappingMatrix,
}

/// Optimizer parameter grouping: the pretrained-analog set (embeddings, text
/// encoder, image blocks before the plug point) steps at `lr_pretrained`,
/// everything newly initialized at `lr_fresh`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrGroup {
    Pretrained,
    Fresh,
}

pub fn lr_group(name: &str, plug_layer: usize) -> LrGroup {
    if name == "token_embedding"
        || name == "text_pos_embedding"
        || name == "image_pos_embedding"
        || name.starts_with("text.")
        || name.starts_with("patch_proj.")
    {
        return LrGroup::Pretrained;
    }
    if let Some(rest) = name.strip_prefix("image.block") {
        if let Some(idx) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
            return if idx < plug_layer { LrGroup::Pretrained } else { LrGroup::Fresh };
        }
    }
    LrGroup::Fresh
}

impl Model {
    /// Fresh model with every weight drawn from the seeded initializer.
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let ls_init = std::env::var("CSEG_LS_INIT")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(LOGIT_SCALE_INIT);
        let mut params = ParamStore::new();
        let mut rng = Rng::new(config.seed ^ 0x5EED_1234_ABCD_0001);
        init_encoder_params(&mut params, &config, vocab.len(), &mut rng)?;
        group::init_group_params(&mut params, &config, &mut rng)?;
        init_recon_params(&mut params, &config, &mut rng)?;
        params.insert("logit_scale", vec![1], vec![ls_init])?;
        Ok(Model { config, vocab, params })
    }

    /// Rebuild from checkpointed parts; shapes are trusted to match.
    pub fn from_parts(config: ModelConfig, vocab: Vocab, params: ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(Model { config, vocab, params })
    }

    /// Build one sample's tape: text feature, image feature through the
    /// grouping module, and the enabled per-sample losses.
    pub fn forward_sample(
        &self,
        token_ids: &[u32],
        pixels: &[f64],
        groups: Option<&PatchGroups>,
        rng: &mut Rng,
        opts: ForwardOpts,
    ) -> Result<SampleForward> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let text_row = encode_text_sample(&mut g, &self.params, cfg, token_ids)?;

        let emb = embed_patches(&mut g, &self.params, cfg, pixels)?;
        let patches = image_stage1(&mut g, &self.params, cfg, emb)?;
        let (regions, mapping) = group_patches(
            &mut g,
            &self.params,
            cfg,
            patches,
            rng,
            opts.training,
            opts.soft_assignment,
        )?;
        let (_, pooled) = image_stage3(&mut g, &self.params, cfg, regions)?;

        let rec = if opts.enable_rec {
            Some(self.reconstruction_branch(&mut g, pixels, rng, opts)?.0)
        } else {
            None
        };
        let sup = if opts.enable_sup {
            let groups = groups.ok_or_else(|| {
                Error::InvalidInput("consistency loss enabled but patch groups missing".into())
            })?;
            Some(superpixel_kl_loss(&mut g, mapping.soft, groups)?)
        } else {
            None
        };
        Ok(SampleForward { graph: g, text_row, image_row: pooled, rec, sup })
    }

    /// Independent per-sample streams, forked in sample order so results do
    /// not depend on scheduling.
    fn fork_sample_rngs(rng: &mut Rng, n: usize) -> Vec<Rng> {
        (0..n).map(|_| Rng::new(rng.next_u64())).collect()
    }

    fn forward_batch(
        &self,
        batch: &TrainBatch,
        rng: &mut Rng,
        opts: ForwardOpts,
    ) -> Result<Vec<SampleForward>> {
        let b = batch.text.len();
        if b == 0 || batch.images.len() != b {
            return Err(Error::InvalidInput(format!(
                "batch has {} captions and {} images",
                b,
                batch.images.len()
            )));
        }
        if opts.enable_sup && batch.groups.as_ref().map(Vec::len) != Some(b) {
            return Err(Error::InvalidInput(
                "superpixel consistency loss enabled but patch groups missing".into(),
            ));
        }
        let forks = Self::fork_sample_rngs(rng, b);
        let outs: Vec<Result<SampleForward>> = map_indexed(b, |i| {
            let mut sample_rng = forks[i];
            self.forward_sample(
                batch.text.sample(i),
                batch.images[i],
                batch.groups.as_ref().map(|g| g[i]),
                &mut sample_rng,
                opts,
            )
        });
        outs.into_iter().collect()
    }

    /// Contrastive head over the collected feature rows, on its own graph.
    fn assemble_contrastive(
        &self,
        samples: &[SampleForward],
    ) -> Result<(Graph, NodeId, NodeId, NodeId)> {
        let b = samples.len();
        let h = self.config.hidden;
        let mut zw_data = Vec::with_capacity(b * h);
        let mut zp_data = Vec::with_capacity(b * h);
        for s in samples {
            zw_data.extend_from_slice(s.graph.data(s.text_row));
            zp_data.extend_from_slice(s.graph.data(s.image_row));
        }
        let mut main = Graph::new();
        let zw = main.leaf(Tensor::new(vec![b, h], zw_data)?.with_grad());
        let zp = main.leaf(Tensor::new(vec![b, h], zp_data)?.with_grad());
        let scale = main.param(&self.params, "logit_scale")?;
        let con = contrastive_loss(&mut main, zw, zp, Some(scale))?;
        Ok((main, con, zw, zp))
    }

    fn outcome(&self, samples: &[SampleForward], con: f64) -> StepOutcome {
        let per_sample: Vec<(f64, f64)> = samples
            .iter()
            .map(|s| {
                (
                    s.rec.map_or(0.0, |r| s.graph.scalar_value(r)),
                    s.sup.map_or(0.0, |v| s.graph.scalar_value(v)),
                )
            })
            .collect();
        let rec = mean_scalar(per_sample.iter().map(|p| p.0), samples.len());
        let sup = mean_scalar(per_sample.iter().map(|p| p.1), samples.len());
        StepOutcome { breakdown: LossBreakdown::new(con, rec, sup), per_sample }
    }

    /// Loss values only — same forward as [`Model::train_step`], no backward.
    pub fn loss_value(&self, batch: &TrainBatch, rng: &mut Rng, opts: ForwardOpts) -> Result<StepOutcome> {
        let samples = self.forward_batch(batch, rng, opts)?;
        let con = if opts.enable_con {
            let (main, con, _, _) = self.assemble_contrastive(&samples)?;
            main.scalar_value(con)
        } else {
            0.0
        };
        Ok(self.outcome(&samples, con))
    }

    /// One full training step's gradients: parallel per-sample forward, the
    /// contrastive head over the collected rows, one backward through it,
    /// then parallel per-sample backward seeded with the feature-row
    /// gradients and the 1/B loss weights. Gradients accumulate into the
    /// parameter store; the optimizer step is the caller's.
    ///
    /// If any loss comes back non-finite the backward is skipped and the
    /// outcome returned for diagnosis.
    pub fn train_step(&mut self, batch: &TrainBatch, rng: &mut Rng, opts: ForwardOpts) -> Result<StepOutcome> {
        let mut samples = self.forward_batch(batch, rng, opts)?;
        let b = samples.len();
        let inv_b = 1.0 / b as f64;

        let (main, con_value) = if opts.enable_con {
            let (mut main, con, zw, zp) = self.assemble_contrastive(&samples)?;
            let value = main.scalar_value(con);
            if value.is_finite() {
                main.backward(con)?;
            }
            (Some((main, zw, zp)), value)
        } else {
            (None, 0.0)
        };

        let outcome = self.outcome(&samples, con_value);
        if !outcome.breakdown.is_finite() {
            return Ok(outcome);
        }

        let h = self.config.hidden;
        let (dzw, dzp) = match &main {
            Some((main, zw, zp)) => (
                main.grad(*zw).map(<[f64]>::to_vec),
                main.grad(*zp).map(<[f64]>::to_vec),
            ),
            None => (None, None),
        };

        try_for_each_mut(&mut samples, |i, s| {
            let mut seeds: Vec<(NodeId, &[f64])> = Vec::with_capacity(4);
            if let (Some(dzw), Some(dzp)) = (&dzw, &dzp) {
                seeds.push((s.text_row, &dzw[i * h..(i + 1) * h]));
                seeds.push((s.image_row, &dzp[i * h..(i + 1) * h]));
            }
            let seed_scalar = [inv_b];
            if let Some(rec) = s.rec {
                seeds.push((rec, &seed_scalar));
            }
            if let Some(sup) = s.sup {
                seeds.push((sup, &seed_scalar));
            }
            if seeds.is_empty() {
                return Ok(());
            }
            s.graph.backward_seeded(&seeds)
        })?;

        if let Some((main, _, _)) = &main {
            main.apply_param_grads(&mut self.params);
        }
        for s in &samples {
            s.graph.apply_param_grads(&mut self.params);
        }
        Ok(outcome)
    }

    /// Masked reconstruction: run the shared encoder and grouping module on
    /// the visible patches only, restore per-patch rows from the region
    /// features through the mapping, refine through the dedicated stage, and
    /// decode every patch (mask token at hidden positions) down to pixels.
    /// Returns the loss node and the reconstructed image.
    pub fn reconstruction_branch(
        &self,
        g: &mut Graph,
        pixels: &[f64],
        rng: &mut Rng,
        opts: ForwardOpts,
    ) -> Result<(NodeId, Vec<f64>)> {
        let cfg = &self.config;
        let n = cfg.num_patches();
        let plan = plan_mask(n, cfg.mask_rate, rng)?;
        self.reconstruction_with_plan(g, pixels, &plan, rng, opts)
    }

    pub fn reconstruction_with_plan(
        &self,
        g: &mut Graph,
        pixels: &[f64],
        plan: &MaskPlan,
        rng: &mut Rng,
        opts: ForwardOpts,
    ) -> Result<(NodeId, Vec<f64>)> {
        let cfg = &self.config;
        let n = cfg.num_patches();
        if plan.masked.len() != n {
            return Err(Error::InvalidInput(format!(
                "mask plan covers {} patches, image has {n}",
                plan.masked.len()
            )));
        }

        let emb_full = embed_patches(g, &self.params, cfg, pixels)?;
        let visible = g.gather_rows(emb_full, &plan.unmasked_index)?;
        let hp = image_stage1(g, &self.params, cfg, visible)?;
        let (regions, mapping) = group_patches(
            g,
            &self.params,
            cfg,
            hp,
            rng,
            opts.training,
            opts.soft_assignment,
        )?;

        // Restore one row per visible patch: a linear map over the center
        // axis of the mapping, then the product with the region features.
        let assign = if opts.soft_assignment { mapping.soft } else { mapping.hard };
        let rw = g.param(&self.params, "recon.restore.weight")?;
        let rb = g.param(&self.params, "recon.restore.bias")?;
        let lin = g.matmul(assign, rw)?;
        let lin = g.add_row(lin, rb)?;
        let restored = g.matmul(lin, regions)?;
        let mut x = g.gelu(restored)?;

        for i in 0..(cfg.layers_image - cfg.plug_layer) {
            x = transformer_block(g, &self.params, &format!("recon.stage{i}"), x, cfg.heads)?;
        }

        // Scatter visible tokens to their positions, mask token elsewhere.
        let u = plan.unmasked_index.len();
        let mut select = vec![0.0; n * u];
        for (pos, &orig) in plan.unmasked_index.iter().enumerate() {
            select[orig * u + pos] = 1.0;
        }
        let select = g.constant(vec![n, u], select)?;
        let placed = g.matmul(select, x)?;
        let mut indicator = vec![0.0; n];
        for &m in &plan.masked_index {
            indicator[m] = 1.0;
        }
        let indicator = g.constant(vec![n, 1], indicator)?;
        let mask_token = g.param(&self.params, "recon.mask_token")?;
        let mask_rows = g.matmul(indicator, mask_token)?;
        let tokens = g.add(placed, mask_rows)?;
        let dec_pos = g.param(&self.params, "recon.decoder_pos_embedding")?;
        let mut d = g.add(tokens, dec_pos)?;

        for i in 0..cfg.decoder_layers {
            d = transformer_block(g, &self.params, &format!("recon.decoder{i}"), d, cfg.heads)?;
        }
        let d = layer_norm_named(g, &self.params, "recon.decoder_ln", d)?;
        let head_w = g.param(&self.params, "recon.head.weight")?;
        let head_b = g.param(&self.params, "recon.head.bias")?;
        let pred = g.matmul(d, head_w)?;
        let pred = g.add_row(pred, head_b)?;
        debug_assert_eq!(g.shape(pred), &[n, cfg.patch_dim()]);

        let target_rows = patchify(pixels, cfg.image_size, cfg.patch_size);
        let target = g.constant(vec![n, cfg.patch_dim()], target_rows)?;
        let diff = g.sub(pred, target)?;
        let sq = g.mul(diff, diff)?;
        let loss = if cfg.mask_loss_masked_only {
            let hidden_rows = g.gather_rows(sq, &plan.masked_index)?;
            g.mean_all(hidden_rows)?
        } else {
            g.mean_all(sq)?
        };

        let reconstructed = unpatchify(g.data(pred), cfg.image_size, cfg.patch_size);
        Ok((loss, reconstructed))
    }

    /// Deterministic eval-mode encoding of one image.
    pub fn encode_image_eval(&self, g: &mut Graph, pixels: &[f64]) -> Result<ImageEncoding> {
        let cfg = &self.config;
        let emb = embed_patches(g, &self.params, cfg, pixels)?;
        let patches = image_stage1(g, &self.params, cfg, emb)?;
        // Eval mode draws no noise; the generator is never advanced.
        let mut dead_rng = Rng::new(0);
        let (regions, mapping) =
            group_patches(g, &self.params, cfg, patches, &mut dead_rng, false, false)?;
        let (z, pooled) = image_stage3(g, &self.params, cfg, regions)?;
        Ok(ImageEncoding { regions: z, pooled, mapping })
    }

    /// Eval-mode text feature of one string, `[1×H]`.
    pub fn encode_text_eval(&self, g: &mut Graph, text: &str) -> Result<NodeId> {
        let ids = crate::text::tokenize(text, &self.vocab, self.config.max_text_len);
        encode_text_sample(g, &self.params, &self.config, &ids)
    }

    /// Clamp the learnable similarity scale into its allowed range.
    pub fn clamp_logit_scale(&mut self) {
        if let Some(p) = self.params.get_mut("logit_scale") {
            p.data[0] = p.data[0].clamp(LOGIT_SCALE_MIN, LOGIT_SCALE_MAX);
        }
    }

    /// Names in each optimizer group; the pair partitions the store.
    pub fn lr_partition(&self) -> (Vec<String>, Vec<String>) {
        let mut pre = Vec::new();
        let mut fresh = Vec::new();
        for name in self.params.names() {
            match lr_group(name, self.config.plug_layer) {
                LrGroup::Pretrained => pre.push(name.to_string()),
                LrGroup::Fresh => fresh.push(name.to_string()),
            }
        }
        (pre, fresh)
    }
}

fn mean_scalar(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.fold(0.0, |acc, v| acc + v) / n as f64
}

fn init_recon_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<()> {
    // The reconstruction stack keeps a small init: its squared-error signal
    // is strong from step one, and a large pixel head would swamp the total
    // loss early.
    for i in 0..(cfg.layers_image - cfg.plug_layer) {
        encoder::init_transformer_block_std(store, &format!("recon.stage{i}"), cfg.hidden, RECON_STD, rng)?;
    }
    init_matrix_std(store, "recon.restore.weight", cfg.centers, cfg.centers, RECON_STD, rng)?;
    init_zeros(store, "recon.restore.bias", vec![cfg.centers])?;
    init_matrix_std(store, "recon.mask_token", 1, cfg.hidden, RECON_STD, rng)?;
    init_matrix_std(store, "recon.decoder_pos_embedding", cfg.num_patches(), cfg.hidden, RECON_STD, rng)?;
    for i in 0..cfg.decoder_layers {
        encoder::init_transformer_block_std(store, &format!("recon.decoder{i}"), cfg.hidden, RECON_STD, rng)?;
    }
    store.insert("recon.decoder_ln.gain", vec![cfg.hidden], vec![1.0; cfg.hidden])?;
    store.insert("recon.decoder_ln.bias", vec![cfg.hidden], vec![0.0; cfg.hidden])?;
    init_matrix_std(store, "recon.head.weight", cfg.hidden, cfg.patch_dim(), RECON_STD, rng)?;
    init_zeros(store, "recon.head.bias", vec![cfg.patch_dim()])
}
