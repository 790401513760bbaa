//! Multi-head scaled dot-product attention built from tape primitives, so
//! its gradient comes from the recorded ops rather than a hand-written rule.

use super::{Graph, NodeId};
use crate::error::{Error, Result};

/// Projection weights for one attention layer: four `[H×H]` matrices and
/// their `[H]` biases.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

/// Multi-head attention with output projection. Self-attention is the
/// `query == key == value` special case; cross-attention passes separate
/// sequences. The hidden width must divide evenly into `heads`.
pub fn multi_head_attention(
    g: &mut Graph,
    query: NodeId,
    key: NodeId,
    value: NodeId,
    heads: usize,
    w: &AttentionWeights,
) -> Result<NodeId> {
    let hidden = *g.shape(query).last().unwrap_or(&0);
    if heads == 0 || hidden % heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "hidden width {hidden} not divisible by {heads} heads"
        )));
    }
    let head_dim = hidden / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = g.matmul(query, w.wq)?;
    let q = g.add_row(q, w.bq)?;
    let k = g.matmul(key, w.wk)?;
    let k = g.add_row(k, w.bk)?;
    let v = g.matmul(value, w.wv)?;
    let v = g.add_row(v, w.bv)?;

    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.softmax(scores, 1)?;
        contexts.push(g.matmul(weights, vh)?);
    }
    let ctx = g.concat_cols(&contexts)?;
    let out = g.matmul(ctx, w.wo)?;
    g.add_row(out, w.bo)
}
