//! Text encoder and the two image-encoder stages surrounding the grouping
//! module.
//!
//! Blocks are pre-norm: `x + Attn(LN(x))` then `x + MLP(LN(x))`, with a 4x
//! MLP expansion and a final layer norm closing each stack. Text attention is
//! bidirectional; the text feature is read from the separator token, the
//! image feature from an elementwise max over region tokens.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{multi_head_attention, AttentionWeights, Graph, NodeId, ParamStore};
use crate::text::TextBatch;

/// Weight init scale for the encoder stacks and grouping module. Desk-scale
/// training from scratch needs features that differ materially across
/// samples at step one; a timid init collapses the contrastive loss onto its
/// uniform fixed point and nothing ever separates.
pub const WEIGHT_STD: f64 = 0.2;
/// The reconstruction stack initializes small: its squared-error gradient is
/// strong regardless, and a large pixel head would dominate the total loss.
pub const RECON_STD: f64 = 0.02;

fn weight_std() -> f64 {
    std::env::var("CSEG_STD").ok().and_then(|v| v.parse().ok()).unwrap_or(WEIGHT_STD)
}

// ── parameter registration ──────────────────────────────────────────────

pub fn init_matrix_std(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut Rng,
) -> Result<()> {
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    store.insert(name, vec![rows, cols], data)
}

pub fn init_matrix(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut Rng) -> Result<()> {
    init_matrix_std(store, name, rows, cols, weight_std(), rng)
}

pub fn init_zeros(store: &mut ParamStore, name: &str, shape: Vec<usize>) -> Result<()> {
    let n = shape.iter().product();
    store.insert(name, shape, vec![0.0; n])
}

fn init_layer_norm(store: &mut ParamStore, prefix: &str, width: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gain"), vec![width], vec![1.0; width])?;
    store.insert(&format!("{prefix}.bias"), vec![width], vec![0.0; width])
}

fn init_attention_std(store: &mut ParamStore, prefix: &str, h: usize, std: f64, rng: &mut Rng) -> Result<()> {
    for w in ["wq", "wk", "wv", "wo"] {
        init_matrix_std(store, &format!("{prefix}.{w}"), h, h, std, rng)?;
    }
    for b in ["bq", "bk", "bv", "bo"] {
        init_zeros(store, &format!("{prefix}.{b}"), vec![h])?;
    }
    Ok(())
}

/// Register every parameter of one pre-norm transformer block.
pub fn init_transformer_block_std(
    store: &mut ParamStore,
    prefix: &str,
    h: usize,
    std: f64,
    rng: &mut Rng,
) -> Result<()> {
    init_layer_norm(store, &format!("{prefix}.ln1"), h)?;
    init_attention_std(store, &format!("{prefix}.attn"), h, std, rng)?;
    init_layer_norm(store, &format!("{prefix}.ln2"), h)?;
    init_matrix_std(store, &format!("{prefix}.mlp.w1"), h, 4 * h, std, rng)?;
    init_zeros(store, &format!("{prefix}.mlp.b1"), vec![4 * h])?;
    init_matrix_std(store, &format!("{prefix}.mlp.w2"), 4 * h, h, std, rng)?;
    init_zeros(store, &format!("{prefix}.mlp.b2"), vec![h])
}

pub fn init_transformer_block(store: &mut ParamStore, prefix: &str, h: usize, rng: &mut Rng) -> Result<()> {
    init_transformer_block_std(store, prefix, h, weight_std(), rng)
}

// ── block forward builders ──────────────────────────────────────────────

fn attention_weights(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<AttentionWeights> {
    Ok(AttentionWeights {
        wq: g.param(store, &format!("{prefix}.wq"))?,
        bq: g.param(store, &format!("{prefix}.bq"))?,
        wk: g.param(store, &format!("{prefix}.wk"))?,
        bk: g.param(store, &format!("{prefix}.bk"))?,
        wv: g.param(store, &format!("{prefix}.wv"))?,
        bv: g.param(store, &format!("{prefix}.bv"))?,
        wo: g.param(store, &format!("{prefix}.wo"))?,
        bo: g.param(store, &format!("{prefix}.bo"))?,
    })
}

pub fn layer_norm_named(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias)
}

fn mlp_named(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w1 = g.param(store, &format!("{prefix}.w1"))?;
    let b1 = g.param(store, &format!("{prefix}.b1"))?;
    let w2 = g.param(store, &format!("{prefix}.w2"))?;
    let b2 = g.param(store, &format!("{prefix}.b2"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h)?;
    let out = g.matmul(h, w2)?;
    g.add_row(out, b2)
}

/// Pre-norm self-attention block over one token sequence.
pub fn transformer_block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let normed = layer_norm_named(g, store, &format!("{prefix}.ln1"), x)?;
    let w = attention_weights(g, store, &format!("{prefix}.attn"))?;
    let att = multi_head_attention(g, normed, normed, normed, heads, &w)?;
    let x = g.add(x, att)?;
    let normed = layer_norm_named(g, store, &format!("{prefix}.ln2"), x)?;
    let m = mlp_named(g, store, &format!("{prefix}.mlp"), normed)?;
    g.add(x, m)
}

/// Same block with external keys/values: queries are normed, the key/value
/// sequence enters as-is.
pub fn cross_attention_block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    queries: NodeId,
    keys_values: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let normed = layer_norm_named(g, store, &format!("{prefix}.ln1"), queries)?;
    let w = attention_weights(g, store, &format!("{prefix}.attn"))?;
    let att = multi_head_attention(g, normed, keys_values, keys_values, heads, &w)?;
    let x = g.add(queries, att)?;
    let normed = layer_norm_named(g, store, &format!("{prefix}.ln2"), x)?;
    let m = mlp_named(g, store, &format!("{prefix}.mlp"), normed)?;
    g.add(x, m)
}

// ── patch handling ───────────────────────────────────────────────────────

/// Flatten an image (`[3 × size × size]`, channel-major) into per-patch rows
/// of `3·ps²` values, patches in row-major grid order, each row ordered
/// channel, then pixel row, then pixel column.
pub fn patchify(pixels: &[f64], image_size: usize, patch_size: usize) -> Vec<f64> {
    let grid = image_size / patch_size;
    let n = grid * grid;
    let pd = 3 * patch_size * patch_size;
    let mut out = vec![0.0; n * pd];
    for gy in 0..grid {
        for gx in 0..grid {
            let patch = gy * grid + gx;
            let mut k = 0;
            for c in 0..3 {
                for py in 0..patch_size {
                    for px in 0..patch_size {
                        let y = gy * patch_size + py;
                        let x = gx * patch_size + px;
                        out[patch * pd + k] = pixels[c * image_size * image_size + y * image_size + x];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(rows: &[f64], image_size: usize, patch_size: usize) -> Vec<f64> {
    let grid = image_size / patch_size;
    let pd = 3 * patch_size * patch_size;
    let mut out = vec![0.0; 3 * image_size * image_size];
    for gy in 0..grid {
        for gx in 0..grid {
            let patch = gy * grid + gx;
            let mut k = 0;
            for c in 0..3 {
                for py in 0..patch_size {
                    for px in 0..patch_size {
                        let y = gy * patch_size + py;
                        let x = gx * patch_size + px;
                        out[c * image_size * image_size + y * image_size + x] = rows[patch * pd + k];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Patch embeddings: flattened patch pixels through the linear projection,
/// plus the learned per-cell positional embedding.
pub fn embed_patches(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    pixels: &[f64],
) -> Result<NodeId> {
    let expected = 3 * cfg.image_size * cfg.image_size;
    if pixels.len() != expected {
        return Err(Error::InvalidInput(format!(
            "image has {} values, config expects {expected}",
            pixels.len()
        )));
    }
    if cfg.image_size % cfg.patch_size != 0 {
        return Err(Error::InvalidConfig(format!(
            "image_size {} not divisible by patch_size {}",
            cfg.image_size, cfg.patch_size
        )));
    }
    let n = cfg.num_patches();
    let rows = patchify(pixels, cfg.image_size, cfg.patch_size);
    let patches = g.constant(vec![n, cfg.patch_dim()], rows)?;
    let w = g.param(store, "patch_proj.weight")?;
    let b = g.param(store, "patch_proj.bias")?;
    let emb = g.matmul(patches, w)?;
    let emb = g.add_row(emb, b)?;
    let pos = g.param(store, "image_pos_embedding")?;
    g.add(emb, pos)
}

// ── encoder stacks ───────────────────────────────────────────────────────

/// Text feature of one caption: embeddings plus positions through the text
/// stack, reading the row at the separator position. `[1×H]`.
pub fn encode_text_sample(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    ids: &[u32],
) -> Result<NodeId> {
    if ids.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    let emb = g.param(store, "token_embedding")?;
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let tokens = g.gather_rows(emb, &idx)?;
    let pos = g.param(store, "text_pos_embedding")?;
    let pos_rows: Vec<usize> = (0..ids.len()).collect();
    let pos_slice = g.gather_rows(pos, &pos_rows)?;
    let mut x = g.add(tokens, pos_slice)?;
    for i in 0..cfg.layers_text {
        x = transformer_block(g, store, &format!("text.block{i}"), x, cfg.heads)?;
    }
    let x = layer_norm_named(g, store, "text.ln_final", x)?;
    g.gather_rows(x, &[ids.len() - 1])
}

/// Batched text features, one row per caption. `[B×H]`.
pub fn encode_text_batch(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    batch: &TextBatch,
) -> Result<NodeId> {
    let mut rows = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        rows.push(encode_text_sample(g, store, cfg, batch.sample(i))?);
    }
    g.concat_rows(&rows)
}

/// Image-encoder blocks up to and including the plug layer.
pub fn image_stage1(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, x: NodeId) -> Result<NodeId> {
    let mut x = x;
    for i in 0..cfg.plug_layer {
        x = transformer_block(g, store, &format!("image.block{i}"), x, cfg.heads)?;
    }
    Ok(x)
}

/// Remaining image-encoder blocks over the region tokens, then the final
/// norm. Returns the region matrix `[L×H]` and its columnwise max `[1×H]`.
pub fn image_stage3(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    regions: NodeId,
) -> Result<(NodeId, NodeId)> {
    let mut x = regions;
    for i in cfg.plug_layer..cfg.layers_image {
        x = transformer_block(g, store, &format!("image.block{i}"), x, cfg.heads)?;
    }
    let z = layer_norm_named(g, store, "image.ln_final", x)?;
    let pooled = g.max_rows(z)?;
    Ok((z, pooled))
}

/// Register all encoder parameters (not the grouping/reconstruction stacks).
pub fn init_encoder_params(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    vocab_size: usize,
    rng: &mut Rng,
) -> Result<()> {
    init_matrix(store, "token_embedding", vocab_size, cfg.hidden, rng)?;
    init_matrix(store, "text_pos_embedding", cfg.max_text_len, cfg.hidden, rng)?;
    for i in 0..cfg.layers_text {
        init_transformer_block(store, &format!("text.block{i}"), cfg.hidden, rng)?;
    }
    init_layer_norm(store, "text.ln_final", cfg.hidden)?;

    init_matrix(store, "patch_proj.weight", cfg.patch_dim(), cfg.hidden, rng)?;
    init_zeros(store, "patch_proj.bias", vec![cfg.hidden])?;
    init_matrix(store, "image_pos_embedding", cfg.num_patches(), cfg.hidden, rng)?;
    for i in 0..cfg.layers_image {
        init_transformer_block(store, &format!("image.block{i}"), cfg.hidden, rng)?;
    }
    init_layer_norm(store, "image.ln_final", cfg.hidden)
}
