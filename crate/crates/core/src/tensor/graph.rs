//! Dynamic computation tape.
//!
//! A [`Graph`] records every operation of one forward pass in topological
//! order. [`Graph::backward`] seeds the scalar loss with gradient 1 and
//! sweeps the tape once in reverse, accumulating gradients additively into
//! every node that requires them. Parameter leaves remember their store name
//! so [`Graph::apply_param_grads`] can move gradients back out.

use std::collections::HashMap;

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

struct Node {
    value: Tensor,
    op: Op,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// x[r×c] + row[c], broadcast over rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Softmax(NodeId, usize),
    LogSoftmax(NodeId, usize),
    /// ln(x + eps), elementwise.
    LnEps(NodeId, f64),
    /// Saves the forward tanh values; the derivative reuses them.
    Gelu { x: NodeId, saved_tanh: Vec<f64> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    NormalizeRows(NodeId),
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    MaxRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// x ⊙ s with s a 1-element tensor; both sides differentiable.
    MulScalar(NodeId, NodeId),
    /// Row i scaled by the fixed factor v[i].
    RowScaleConst(NodeId, Vec<f64>),
    Reshape(NodeId),
    /// Per-row one-hot argmax with straight-through gradient.
    HardOneHotSt(NodeId),
}

const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: Vec<(usize, String)>,
    param_cache: HashMap<String, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_leaves: Vec::new(), param_cache: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a tensor as a leaf; its `requires_grad` flag is honored.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    /// Differentiable leaf, for tests and probes.
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        Ok(self.leaf(Tensor::new(shape, data)?.with_grad()))
    }

    /// Leaf for a named parameter. Repeated requests return the same node, so
    /// shared weights accumulate fan-out gradients on a single leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_cache.get(name) {
            return Ok(id);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))?;
        let t = Tensor::new(p.shape.clone(), p.data.clone())?.with_grad();
        let id = self.push(t, Op::Leaf);
        self.param_leaves.push((id.0, name.to_string()));
        self.param_cache.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value.data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.numel(), 1);
        self.nodes[id.0].value.data[0]
    }

    fn rows_cols(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::ShapeMismatch { op, detail: format!("expected 2-d tensor, got {s:?}") }),
        }
    }

    // ── elementwise and broadcast ───────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let t = self.out_like(a, data);
        Ok(self.push_track(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let t = self.out_like(a, data);
        Ok(self.push_track(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let t = self.out_like(a, data);
        Ok(self.push_track(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "add_row")?;
        if self.shape(row) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                detail: format!("matrix [{r}x{c}] vs row {:?}", self.shape(row)),
            });
        }
        let rowd = self.data(row);
        let mut data = self.data(x).to_vec();
        for chunk in data.chunks_mut(c) {
            for (d, b) in chunk.iter_mut().zip(rowd) {
                *d += b;
            }
        }
        let t = self.out_like(x, data);
        Ok(self.push_track(t, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let t = self.out_like(x, data);
        Ok(self.push_track(t, Op::Scale(x, c), &[x]))
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.tensor(s).numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar",
                detail: format!("scalar operand has shape {:?}", self.shape(s)),
            });
        }
        let sv = self.data(s)[0];
        let data = self.data(x).iter().map(|v| v * sv).collect();
        let t = self.out_like(x, data);
        Ok(self.push_track(t, Op::MulScalar(x, s), &[x, s]))
    }

    pub fn ln_eps(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let data = self.data(x).iter().map(|v| (v + eps).ln()).collect();
        let t = self.out_like(x, data);
        Ok(self.push_track(t, Op::LnEps(x, eps), &[x]))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let xd = self.data(x);
        let mut data = vec![0.0; xd.len()];
        let mut saved_tanh = vec![0.0; xd.len()];
        for ((out, t), &v) in data.iter_mut().zip(saved_tanh.iter_mut()).zip(xd) {
            let th = (GELU_SQRT_2_OVER_PI * (v + GELU_CUBIC * v * v * v)).tanh();
            *t = th;
            *out = 0.5 * v * (1.0 + th);
        }
        let t = self.out_like(x, data);
        Ok(self.push_track(t, Op::Gelu { x, saved_tanh }, &[x]))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.rows_cols(a, "matmul")?;
        let (kb, n) = self.rows_cols(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("[{m}x{ka}] x [{kb}x{n}]"),
            });
        }
        let data = matmul_nn(self.data(a), self.data(b), m, ka, n);
        let t = self.out_tensor(vec![m, n], data, &[a, b]);
        Ok(self.push(t, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "transpose")?;
        let xd = self.data(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xd[i * c + j];
            }
        }
        let t = self.out_tensor(vec![c, r], data, &[x]);
        Ok(self.push(t, Op::Transpose(x)))
    }

    // ── normalization ───────────────────────────────────────────────────

    /// Numerically stabilized softmax along `axis` (0 = down columns,
    /// 1 = along rows) of a 2-d tensor; 1-d input is treated as one row.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let (shape, data, axis) = self.lanes_apply(x, axis, "softmax", softmax_lane)?;
        let t = self.out_tensor(shape, data, &[x]);
        Ok(self.push(t, Op::Softmax(x, axis)))
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let (shape, data, axis) = self.lanes_apply(x, axis, "log_softmax", log_softmax_lane)?;
        let t = self.out_tensor(shape, data, &[x]);
        Ok(self.push(t, Op::LogSoftmax(x, axis)))
    }

    /// Per-row mean/variance normalization over the last axis followed by an
    /// elementwise affine. Variance gets a 1e-5 floor.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols_or_row(x);
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "last axis {c} vs gain {:?} / bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            });
        }
        let xd = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let (mean, inv) = layer_norm_stats(row);
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let t = self.out_tensor(self.shape(x).to_vec(), data, &[x, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias }))
    }

    /// L2-normalize each row. Zero rows map to zero (norm floored at 1e-30).
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "normalize_rows")?;
        let xd = self.data(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let norm = row_norm(row);
            for j in 0..c {
                data[i * c + j] = row[j] / norm;
            }
        }
        let t = self.out_tensor(vec![r, c], data, &[x]);
        Ok(self.push(t, Op::NormalizeRows(x)))
    }

    // ── structural ops ──────────────────────────────────────────────────

    pub fn gather_rows(&mut self, x: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                detail: format!("row {bad} out of range for {r} rows"),
            });
        }
        if ids.is_empty() {
            return Err(Error::ShapeMismatch { op: "gather_rows", detail: "empty index list".into() });
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let t = self.out_tensor(vec![ids.len(), c], data, &[x]);
        Ok(self.push(t, Op::GatherRows(x, ids.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch { op: "concat_rows", detail: "no inputs".into() });
        }
        let (_, c) = self.rows_cols(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, cp) = self.rows_cols(p, "concat_rows")?;
            if cp != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column widths differ: {c} vs {cp}"),
                });
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        let t = self.out_tensor(vec![rows, c], data, parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("columns {start}..{} of {c}", start + len),
            });
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let t = self.out_tensor(vec![r, len], data, &[x]);
        Ok(self.push(t, Op::SliceCols { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch { op: "concat_cols", detail: "no inputs".into() });
        }
        let (r, _) = self.rows_cols(parts[0], "concat_cols")?;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| self.rows_cols(p, "concat_cols").map(|(rp, cp)| {
                debug_assert_eq!(rp, r);
                cp
            }))
            .collect::<Result<_>>()?;
        for &p in parts {
            if self.rows_cols(p, "concat_cols")?.0 != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: "row counts differ".into(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.data(p);
            for i in 0..r {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let t = self.out_tensor(vec![r, total], data, parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Columnwise max over rows: [r×c] → [1×c]. Gradient routes to the first
    /// maximal row of each column.
    pub fn max_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "max_rows")?;
        let xd = self.data(x);
        let mut data = xd[..c].to_vec();
        for i in 1..r {
            for j in 0..c {
                if xd[i * c + j] > data[j] {
                    data[j] = xd[i * c + j];
                }
            }
        }
        let t = self.out_tensor(vec![1, c], data, &[x]);
        Ok(self.push(t, Op::MaxRows(x)))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.data(x).iter().sum();
        let t = self.out_tensor(vec![1], vec![s], &[x]);
        Ok(self.push(t, Op::SumAll(x)))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.tensor(x).numel();
        let s: f64 = self.data(x).iter().sum();
        let t = self.out_tensor(vec![1], vec![s / n as f64], &[x]);
        Ok(self.push(t, Op::MeanAll(x)))
    }

    pub fn row_scale_const(&mut self, x: NodeId, factors: &[f64]) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "row_scale")?;
        if factors.len() != r {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                detail: format!("{r} rows vs {} factors", factors.len()),
            });
        }
        let xd = self.data(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = xd[i * c + j] * factors[i];
            }
        }
        let t = self.out_tensor(vec![r, c], data, &[x]);
        Ok(self.push(t, Op::RowScaleConst(x, factors.to_vec())))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.tensor(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape(x)),
            });
        }
        let t = self.out_tensor(shape, self.data(x).to_vec(), &[x]);
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Per-row argmax one-hot with identity (straight-through) backward.
    pub fn hard_one_hot_st(&mut self, soft: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(soft, "hard_one_hot")?;
        let sd = self.data(soft);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            data[i * c + argmax(&sd[i * c..(i + 1) * c])] = 1.0;
        }
        let t = self.out_tensor(vec![r, c], data, &[soft]);
        Ok(self.push(t, Op::HardOneHotSt(soft)))
    }

    /// Sampled hard assignment: in training mode each row gets independent
    /// Gumbel noise before the temperature-scaled softmax; in eval mode the
    /// result is the deterministic argmax of the raw logits. Returns
    /// `(hard, soft)`; gradients flow through `hard` as if it were `soft`.
    pub fn gumbel_softmax_hard(
        &mut self,
        logits: NodeId,
        temperature: f64,
        rng: &mut Rng,
        training: bool,
    ) -> Result<(NodeId, NodeId)> {
        if temperature <= 0.0 {
            return Err(Error::InvalidConfig(format!("gumbel temperature {temperature} must be > 0")));
        }
        let (r, c) = self.rows_cols(logits, "gumbel_softmax")?;
        let scaled = if training {
            let noise: Vec<f64> = (0..r * c).map(|_| rng.gumbel()).collect();
            let noise = self.constant(vec![r, c], noise)?;
            let perturbed = self.add(logits, noise)?;
            self.scale(perturbed, 1.0 / temperature)?
        } else {
            self.scale(logits, 1.0 / temperature)?
        };
        let soft = self.softmax(scaled, 1)?;
        let hard = self.hard_one_hot_st(soft)?;
        Ok((hard, soft))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate additively into
    /// each node's `grad` slot, so a second call without reset doubles them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.tensor(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(&[(loss, &[1.0])])
    }

    /// Reverse sweep seeded with explicit output gradients, for losses whose
    /// tail lives on another tape (the per-sample training graphs receive
    /// their contrastive gradient rows this way).
    pub fn backward_seeded(&mut self, seeds: &[(NodeId, &[f64])]) -> Result<()> {
        let mut top = 0usize;
        for (id, seed) in seeds {
            if seed.len() != self.tensor(*id).numel() {
                return Err(Error::Usage(format!(
                    "seed gradient has {} values for shape {:?}",
                    seed.len(),
                    self.shape(*id)
                )));
            }
            top = top.max(id.0);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=top).map(|_| None).collect();
        for (id, seed) in seeds {
            match grads[id.0].as_mut() {
                Some(g) => axpy(g, seed, 1.0),
                None => grads[id.0] = Some(seed.to_vec()),
            }
        }

        for idx in (0..=top).rev() {
            if !self.nodes[idx].value.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gout, &mut grads);
            let node = &mut self.nodes[idx];
            match node.value.grad.as_mut() {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&gout) {
                        *a += g;
                    }
                }
                None => node.value.grad = Some(gout),
            }
        }
        Ok(())
    }

    /// Add gradients collected on parameter leaves back into the store.
    pub fn apply_param_grads(&self, store: &mut ParamStore) {
        for (idx, name) in &self.param_leaves {
            if let Some(g) = self.nodes[*idx].value.grad.as_ref() {
                if let Some(p) = store.get_mut(name) {
                    for (acc, v) in p.grad.iter_mut().zip(g) {
                        *acc += v;
                    }
                }
            }
        }
    }

    fn backprop_node(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_into = |grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: &dyn Fn(&mut [f64]), this: &Graph| {
            if !this.nodes[id.0].value.requires_grad {
                return;
            }
            let slot = grads[id.0]
                .get_or_insert_with(|| vec![0.0; this.nodes[id.0].value.numel()]);
            contrib(slot);
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(grads, *a, &|g| axpy(g, gout, 1.0), self);
                add_into(grads, *b, &|g| axpy(g, gout, 1.0), self);
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, &|g| axpy(g, gout, 1.0), self);
                add_into(grads, *b, &|g| axpy(g, gout, -1.0), self);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                add_into(grads, *a, &|g| {
                    for ((gi, &go), &bv) in g.iter_mut().zip(gout).zip(bd) {
                        *gi += go * bv;
                    }
                }, self);
                add_into(grads, *b, &|g| {
                    for ((gi, &go), &av) in g.iter_mut().zip(gout).zip(ad) {
                        *gi += go * av;
                    }
                }, self);
            }
            Op::AddRow(x, row) => {
                let c = self.tensor(*row).numel();
                add_into(grads, *x, &|g| axpy(g, gout, 1.0), self);
                add_into(grads, *row, &|g| {
                    for chunk in gout.chunks(c) {
                        for (gj, v) in g.iter_mut().zip(chunk) {
                            *gj += v;
                        }
                    }
                }, self);
            }
            Op::Scale(x, c) => {
                let c = *c;
                add_into(grads, *x, &|g| axpy(g, gout, c), self);
            }
            Op::MulScalar(x, s) => {
                let sv = self.data(*s)[0];
                let xd = self.data(*x);
                add_into(grads, *x, &|g| axpy(g, gout, sv), self);
                add_into(grads, *s, &|g| {
                    let mut acc = 0.0;
                    for i in 0..xd.len() {
                        acc += gout[i] * xd[i];
                    }
                    g[0] += acc;
                }, self);
            }
            Op::LnEps(x, eps) => {
                let (xd, eps) = (self.data(*x), *eps);
                add_into(grads, *x, &|g| {
                    for ((gi, &go), &xv) in g.iter_mut().zip(gout).zip(xd) {
                        *gi += go / (xv + eps);
                    }
                }, self);
            }
            Op::Gelu { x, saved_tanh } => {
                let xd = self.data(*x);
                add_into(grads, *x, &|g| {
                    for (((gi, &go), &v), &t) in g.iter_mut().zip(gout).zip(xd).zip(saved_tanh) {
                        let sech2 = 1.0 - t * t;
                        let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * v * v);
                        *gi += go * (0.5 * (1.0 + t) + 0.5 * v * sech2 * du);
                    }
                }, self);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                add_into(grads, *a, &|g| {
                    let da = matmul_nt(gout, bd, m, n, k);
                    axpy(g, &da, 1.0);
                }, self);
                add_into(grads, *b, &|g| {
                    let db = matmul_tn(ad, gout, k, m, n);
                    axpy(g, &db, 1.0);
                }, self);
            }
            Op::Transpose(x) => {
                let (c, r) = (self.shape(idx_id(idx))[0], self.shape(idx_id(idx))[1]);
                add_into(grads, *x, &|g| {
                    // gout is [c×r]; scatter back transposed
                    for i in 0..c {
                        for j in 0..r {
                            g[j * c + i] += gout[i * r + j];
                        }
                    }
                }, self);
            }
            Op::Softmax(x, axis) => {
                let y = self.data(idx_id(idx));
                let (r, c) = two_d(self.shape(idx_id(idx)));
                let axis = *axis;
                add_into(grads, *x, &|g| {
                    if axis == 1 {
                        for ((grow, yrow), gorow) in
                            g.chunks_mut(c).zip(y.chunks(c)).zip(gout.chunks(c))
                        {
                            let mut dot = 0.0;
                            for (&go, &yv) in gorow.iter().zip(yrow) {
                                dot += go * yv;
                            }
                            for ((gi, &go), &yv) in grow.iter_mut().zip(gorow).zip(yrow) {
                                *gi += yv * (go - dot);
                            }
                        }
                    } else {
                        for_each_lane(r, c, axis, |lane| {
                            let mut dot = 0.0;
                            for &i in lane {
                                dot += gout[i] * y[i];
                            }
                            for &i in lane {
                                g[i] += y[i] * (gout[i] - dot);
                            }
                        });
                    }
                }, self);
            }
            Op::LogSoftmax(x, axis) => {
                let y = self.data(idx_id(idx));
                let (r, c) = two_d(self.shape(idx_id(idx)));
                let axis = *axis;
                add_into(grads, *x, &|g| {
                    for_each_lane(r, c, axis, |lane| {
                        let mut sum = 0.0;
                        for &i in lane {
                            sum += gout[i];
                        }
                        for &i in lane {
                            g[i] += gout[i] - y[i].exp() * sum;
                        }
                    });
                }, self);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xd = self.data(*x);
                let gd = self.data(*gain);
                let c = self.tensor(*gain).numel();
                let r = xd.len() / c;
                add_into(grads, *bias, &|g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += gout[i * c + j];
                        }
                    }
                }, self);
                add_into(grads, *gain, &|g| {
                    for i in 0..r {
                        let row = &xd[i * c..(i + 1) * c];
                        let (mean, inv) = layer_norm_stats(row);
                        for j in 0..c {
                            g[j] += gout[i * c + j] * (row[j] - mean) * inv;
                        }
                    }
                }, self);
                add_into(grads, *x, &|g| {
                    for i in 0..r {
                        let row = &xd[i * c..(i + 1) * c];
                        let (mean, inv) = layer_norm_stats(row);
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = gout[i * c + j] * gd[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= c as f64;
                        mean_dxhat_xhat /= c as f64;
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = gout[i * c + j] * gd[j];
                            g[i * c + j] += inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }, self);
            }
            Op::NormalizeRows(x) => {
                let xd = self.data(*x);
                let (r, c) = two_d(self.shape(*x));
                add_into(grads, *x, &|g| {
                    for i in 0..r {
                        let row = &xd[i * c..(i + 1) * c];
                        let norm = row_norm(row);
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += gout[i * c + j] * row[j] / norm;
                        }
                        for j in 0..c {
                            g[i * c + j] += (gout[i * c + j] - row[j] / norm * dot) / norm;
                        }
                    }
                }, self);
            }
            Op::GatherRows(x, ids) => {
                let c = self.shape(*x)[1];
                add_into(grads, *x, &|g| {
                    for (pos, &src) in ids.iter().enumerate() {
                        for j in 0..c {
                            g[src * c + j] += gout[pos * c + j];
                        }
                    }
                }, self);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.tensor(p).numel();
                    let slice = &gout[offset..offset + n];
                    add_into(grads, p, &|g| axpy(g, slice, 1.0), self);
                    offset += n;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = two_d(self.shape(*x));
                let (start, len) = (*start, *len);
                add_into(grads, *x, &|g| {
                    for i in 0..r {
                        for j in 0..len {
                            g[i * c + start + j] += gout[i * len + j];
                        }
                    }
                }, self);
            }
            Op::ConcatCols(parts) => {
                let r = self.shape(parts[0])[0];
                let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    add_into(grads, p, &|g| {
                        for i in 0..r {
                            for j in 0..w {
                                g[i * w + j] += gout[i * total + offset + j];
                            }
                        }
                    }, self);
                    offset += w;
                }
            }
            Op::MaxRows(x) => {
                let xd = self.data(*x);
                let (r, c) = two_d(self.shape(*x));
                add_into(grads, *x, &|g| {
                    for j in 0..c {
                        let mut best = 0;
                        for i in 1..r {
                            if xd[i * c + j] > xd[best * c + j] {
                                best = i;
                            }
                        }
                        g[best * c + j] += gout[j];
                    }
                }, self);
            }
            Op::SumAll(x) => {
                add_into(grads, *x, &|g| {
                    for gi in g.iter_mut() {
                        *gi += gout[0];
                    }
                }, self);
            }
            Op::MeanAll(x) => {
                let n = self.tensor(*x).numel() as f64;
                add_into(grads, *x, &|g| {
                    for gi in g.iter_mut() {
                        *gi += gout[0] / n;
                    }
                }, self);
            }
            Op::RowScaleConst(x, factors) => {
                let c = self.shape(*x)[1];
                add_into(grads, *x, &|g| {
                    for (i, &f) in factors.iter().enumerate() {
                        for j in 0..c {
                            g[i * c + j] += gout[i * c + j] * f;
                        }
                    }
                }, self);
            }
            Op::Reshape(x) => {
                add_into(grads, *x, &|g| axpy(g, gout, 1.0), self);
            }
            Op::HardOneHotSt(soft) => {
                add_into(grads, *soft, &|g| axpy(g, gout, 1.0), self);
            }
        }
    }

    // ── helpers ─────────────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    fn rows_cols_or_row(&self, id: NodeId) -> (usize, usize) {
        let s = self.shape(id);
        if s.len() == 2 { (s[0], s[1]) } else { (1, s.iter().product()) }
    }

    fn out_like(&self, src: NodeId, data: Vec<f64>) -> Tensor {
        Tensor {
            shape: self.shape(src).to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    fn out_tensor(&self, shape: Vec<usize>, data: Vec<f64>, inputs: &[NodeId]) -> Tensor {
        let rg = inputs.iter().any(|&i| self.nodes[i.0].value.requires_grad);
        Tensor { shape, data, requires_grad: rg, grad: None }
    }

    fn push_track(&mut self, mut t: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        t.requires_grad = inputs.iter().any(|&i| self.nodes[i.0].value.requires_grad);
        self.push(t, op)
    }

    /// Returns (shape, result, effective axis); a 1-d input is normalized to
    /// one row with axis 1 so forward and backward agree on lane layout.
    fn lanes_apply(
        &self,
        x: NodeId,
        axis: usize,
        op: &'static str,
        f: fn(&[f64], &mut [f64]),
    ) -> Result<(Vec<usize>, Vec<f64>, usize)> {
        let s = self.shape(x);
        let (r, c, axis) = match s.len() {
            1 => {
                if axis != 0 {
                    return Err(Error::ShapeMismatch { op, detail: format!("axis {axis} out of range for 1-d") });
                }
                (1, s[0], 1)
            }
            2 => {
                if axis > 1 {
                    return Err(Error::ShapeMismatch { op, detail: format!("axis {axis} out of range") });
                }
                (s[0], s[1], axis)
            }
            _ => return Err(Error::ShapeMismatch { op, detail: format!("expected 1-d or 2-d, got {s:?}") }),
        };
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        if axis == 1 {
            for (xrow, orow) in xd.chunks(c).zip(out.chunks_mut(c)) {
                f(xrow, orow);
            }
        } else {
            let mut src = vec![0.0; r];
            let mut dst = vec![0.0; r];
            for j in 0..c {
                for i in 0..r {
                    src[i] = xd[i * c + j];
                }
                f(&src, &mut dst);
                for i in 0..r {
                    out[i * c + j] = dst[i];
                }
            }
        }
        Ok((s.to_vec(), out, axis))
    }
}

fn idx_id(idx: usize) -> NodeId {
    NodeId(idx)
}

fn two_d(s: &[usize]) -> (usize, usize) {
    if s.len() == 2 { (s[0], s[1]) } else { (1, s.iter().product()) }
}

fn axpy(acc: &mut [f64], x: &[f64], a: f64) {
    for (g, v) in acc.iter_mut().zip(x) {
        *g += a * v;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn row_norm(row: &[f64]) -> f64 {
    let sq: f64 = row.iter().map(|v| v * v).sum();
    sq.sqrt().max(1e-30)
}

fn layer_norm_stats(row: &[f64]) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Visit index lanes of a [r×c] tensor along `axis` (1 = rows, 0 = columns).
fn for_each_lane(r: usize, c: usize, axis: usize, mut f: impl FnMut(&[usize])) {
    let mut lane = Vec::with_capacity(if axis == 1 { c } else { r });
    if axis == 1 {
        for i in 0..r {
            lane.clear();
            lane.extend((0..c).map(|j| i * c + j));
            f(&lane);
        }
    } else {
        for j in 0..c {
            lane.clear();
            lane.extend((0..r).map(|i| i * c + j));
            f(&lane);
        }
    }
}

fn softmax_lane(x: &[f64], out: &mut [f64]) {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_lane(x: &[f64], out: &mut [f64]) {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for &v in x {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Central-difference gradient of `build` at `data`, compared against the
    /// tape gradient. `build` must be a deterministic scalar function of the
    /// single variable leaf.
    fn check_grad(
        shape: Vec<usize>,
        data: Vec<f64>,
        tol: f64,
        build: impl Fn(&mut Graph, NodeId) -> NodeId,
    ) {
        let mut g = Graph::new();
        let x = g.variable(shape.clone(), data.clone()).unwrap();
        let loss = build(&mut g, x);
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();

        let h = 1e-5;
        for i in 0..data.len() {
            let eval = |v: f64| {
                let mut gg = Graph::new();
                let mut d = data.clone();
                d[i] = v;
                let xx = gg.variable(shape.clone(), d).unwrap();
                let l = build(&mut gg, xx);
                gg.scalar_value(l)
            };
            let numeric = (eval(data[i] + h) - eval(data[i] - h)) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
            assert!(
                (analytic[i] - numeric).abs() / denom < tol,
                "element {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
    }

    fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let i3 = g.constant(vec![3, 3], eye).unwrap();
        let x = g.constant(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = g.matmul(i3, x).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.constant(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = Rng::new(1);
        let bdata = rand_vec(&mut rng, 12);
        let adata = rand_vec(&mut rng, 8);
        check_grad(vec![2, 4], adata, 1e-6, |g, a| {
            let b = g.constant(vec![4, 3], bdata.clone()).unwrap();
            let c = g.matmul(a, b).unwrap();
            g.sum_all(c).unwrap()
        });
    }

    #[test]
    fn softmax_uniform_and_stabilized() {
        let mut g = Graph::new();
        let x = g.constant(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        for v in g.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = g.constant(vec![3], vec![1000.0, 0.0, 0.0]).unwrap();
        let yb = g.softmax(big, 0).unwrap();
        assert!(g.tensor(yb).is_finite());
        assert!((g.data(yb)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_both_axes() {
        let mut rng = Rng::new(3);
        let mut g = Graph::new();
        let x = g.constant(vec![4, 5], rand_vec(&mut rng, 20)).unwrap();
        for axis in [0, 1] {
            let y = g.softmax(x, axis).unwrap();
            let d = g.data(y);
            let (lanes, stride, step) = if axis == 1 { (4, 5, 1) } else { (5, 1, 5) };
            for l in 0..lanes {
                let mut s = 0.0;
                for i in 0..(if axis == 1 { 5 } else { 4 }) {
                    s += d[l * stride + i * step];
                }
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = Rng::new(2);
        let data = rand_vec(&mut rng, 12);
        let wdata = rand_vec(&mut rng, 12);
        for axis in [0, 1] {
            check_grad(vec![3, 4], data.clone(), 1e-6, |g, x| {
                let y = g.softmax(x, axis).unwrap();
                let w = g.constant(vec![3, 4], wdata.clone()).unwrap();
                let p = g.mul(y, w).unwrap();
                g.sum_all(p).unwrap()
            });
        }
    }

    #[test]
    fn log_softmax_gradient_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let data = rand_vec(&mut rng, 12);
        let wdata = rand_vec(&mut rng, 12);
        for axis in [0, 1] {
            check_grad(vec![3, 4], data.clone(), 1e-6, |g, x| {
                let y = g.log_softmax(x, axis).unwrap();
                let w = g.constant(vec![3, 4], wdata.clone()).unwrap();
                let p = g.mul(y, w).unwrap();
                g.sum_all(p).unwrap()
            });
        }
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let mut g = Graph::new();
        let x = g.constant(vec![2, 4], vec![3.0; 8]).unwrap();
        let gain = g.constant(vec![4], vec![1.0; 4]).unwrap();
        let bias = g.constant(vec![4], vec![0.0; 4]).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        for v in g.data(y) {
            assert!(v.abs() < 1e-9, "zero-variance row should collapse to bias, got {v}");
        }
    }

    #[test]
    fn layer_norm_output_mean_tracks_bias() {
        let mut rng = Rng::new(4);
        let mut g = Graph::new();
        let x = g.constant(vec![3, 8], rand_vec(&mut rng, 24)).unwrap();
        let gain = g.constant(vec![8], vec![1.0; 8]).unwrap();
        let bias_vals: Vec<f64> = rand_vec(&mut rng, 8);
        let bias_mean: f64 = bias_vals.iter().sum::<f64>() / 8.0;
        let bias = g.constant(vec![8], bias_vals).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        for row in g.data(y).chunks(8) {
            let m: f64 = row.iter().sum::<f64>() / 8.0;
            assert!((m - bias_mean).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let data = rand_vec(&mut rng, 12);
        let gain: Vec<f64> = (0..4).map(|_| 1.0 + 0.3 * rng.normal()).collect();
        let bias = rand_vec(&mut rng, 4);
        let wdata = rand_vec(&mut rng, 12);
        check_grad(vec![3, 4], data, 1e-5, |g, x| {
            let gn = g.constant(vec![4], gain.clone()).unwrap();
            let bn = g.constant(vec![4], bias.clone()).unwrap();
            let y = g.layer_norm(x, gn, bn).unwrap();
            let w = g.constant(vec![3, 4], wdata.clone()).unwrap();
            let p = g.mul(y, w).unwrap();
            g.sum_all(p).unwrap()
        });
    }

    #[test]
    fn gelu_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.constant(vec![2], vec![0.0, 10.0]).unwrap();
        let y = g.gelu(x).unwrap();
        assert_eq!(g.data(y)[0], 0.0);
        assert!((g.data(y)[1] - 10.0).abs() < 1e-6);

        let mut rng = Rng::new(6);
        let data = rand_vec(&mut rng, 10);
        check_grad(vec![10], data, 1e-6, |g, x| {
            let y = g.gelu(x).unwrap();
            g.sum_all(y).unwrap()
        });
    }

    #[test]
    fn normalize_rows_gradient_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let data = rand_vec(&mut rng, 12);
        let wdata = rand_vec(&mut rng, 12);
        check_grad(vec![3, 4], data, 1e-6, |g, x| {
            let y = g.normalize_rows(x).unwrap();
            let w = g.constant(vec![3, 4], wdata.clone()).unwrap();
            let p = g.mul(y, w).unwrap();
            g.sum_all(p).unwrap()
        });
    }

    #[test]
    fn structural_ops_gradient_matches_finite_differences() {
        // One composite touching gather/concat/slice/transpose/max/row-scale.
        let mut rng = Rng::new(8);
        let data = rand_vec(&mut rng, 20);
        check_grad(vec![4, 5], data, 1e-6, |g, x| {
            let picked = g.gather_rows(x, &[0, 2, 2, 3]).unwrap();
            let left = g.slice_cols(picked, 0, 2).unwrap();
            let right = g.slice_cols(picked, 2, 3).unwrap();
            let rt = g.transpose(right).unwrap();
            let back = g.transpose(rt).unwrap();
            let joined = g.concat_cols(&[left, back]).unwrap();
            let scaled = g.row_scale_const(joined, &[0.5, -1.0, 2.0, 1.5]).unwrap();
            let mx = g.max_rows(scaled).unwrap();
            let s1 = g.sum_all(mx).unwrap();
            let m1 = g.mean_all(scaled).unwrap();
            let tot = g.add(s1, m1).unwrap();
            g.scale(tot, 1.7).unwrap()
        });
    }

    #[test]
    fn backward_of_sum_is_ones_and_accumulates() {
        let mut g = Graph::new();
        let x = g.variable(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
        // Second backward without reset doubles the stored gradient.
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.variable(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn gumbel_hard_rows_are_one_hot() {
        let mut rng = Rng::new(9);
        let mut g = Graph::new();
        let logits = g.variable(vec![6, 4], rand_vec(&mut rng, 24)).unwrap();
        let (hard, soft) = g.gumbel_softmax_hard(logits, 1.0, &mut rng, true).unwrap();
        for row in g.data(hard).chunks(4) {
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 3);
        }
        for row in g.data(soft).chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gumbel_eval_is_argmax() {
        let mut rng = Rng::new(10);
        let mut g = Graph::new();
        let logits = g.constant(vec![1, 3], vec![5.0, 0.0, 0.0]).unwrap();
        let (hard, _) = g.gumbel_softmax_hard(logits, 1.0, &mut rng, false).unwrap();
        assert_eq!(g.data(hard), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn gumbel_training_reproducible_from_seed() {
        let run = || {
            let mut rng = Rng::new(77);
            let mut g = Graph::new();
            let logits = g.constant(vec![5, 3], vec![0.1; 15]).unwrap();
            let (hard, soft) = g.gumbel_softmax_hard(logits, 1.0, &mut rng, true).unwrap();
            (g.data(hard).to_vec(), g.data(soft).to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn straight_through_gradient_equals_soft_gradient() {
        // Defining property of the estimator: grad of sum(hard·W) w.r.t. the
        // logits equals grad of sum(soft·W).
        let mut rng = Rng::new(11);
        let ldata = rand_vec(&mut rng, 12);
        let wdata = rand_vec(&mut rng, 8);
        let noise_rng = Rng::new(55);

        let grad_via = |use_hard: bool| {
            let mut r = noise_rng;
            let mut g = Graph::new();
            let logits = g.variable(vec![3, 4], ldata.clone()).unwrap();
            let (hard, soft) = g.gumbel_softmax_hard(logits, 1.0, &mut r, true).unwrap();
            let w = g.constant(vec![4, 2], wdata.clone()).unwrap();
            let picked = if use_hard { hard } else { soft };
            let p = g.matmul(picked, w).unwrap();
            let s = g.sum_all(p).unwrap();
            g.backward(s).unwrap();
            g.grad(logits).unwrap().to_vec()
        };
        let gh = grad_via(true);
        let gs = grad_via(false);
        for (a, b) in gh.iter().zip(&gs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn param_leaves_are_cached_and_grads_flow_to_store() {
        let mut store = ParamStore::new();
        store.insert("w", vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let w1 = g.param(&store, "w").unwrap();
        let w2 = g.param(&store, "w").unwrap();
        assert_eq!(w1, w2);
        let x = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = g.matmul(x, w1).unwrap();
        let z = g.matmul(y, w2).unwrap(); // shared leaf used twice
        let s = g.sum_all(z).unwrap();
        g.backward(s).unwrap();
        g.apply_param_grads(&mut store);
        assert!(store.get("w").unwrap().grad.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn forward_ops_stay_finite_on_finite_inputs() {
        let mut rng = Rng::new(13);
        for _ in 0..50 {
            let mut g = Graph::new();
            let data: Vec<f64> = (0..24).map(|_| rng.normal() * 100.0).collect();
            let x = g.constant(vec![4, 6], data).unwrap();
            let soft = g.softmax(x, 1).unwrap();
            let gel = g.gelu(x).unwrap();
            let gain = g.constant(vec![6], vec![1.0; 6]).unwrap();
            let bias = g.constant(vec![6], vec![0.0; 6]).unwrap();
            let ln = g.layer_norm(x, gain, bias).unwrap();
            let nr = g.normalize_rows(x).unwrap();
            for id in [soft, gel, ln, nr] {
                assert!(g.tensor(id).is_finite());
            }
        }
    }
}
