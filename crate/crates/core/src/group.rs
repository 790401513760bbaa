//! Patch grouping with learnable centers.
//!
//! A bank of L learnable center vectors is contextualized against the patch
//! features through cross-attention blocks, each patch is hard-assigned to
//! one center by a Gumbel-Softmax over the patch-center logits, and region
//! features are pooled as the per-center mean of assigned patches (plus the
//! contextual center) through a two-layer MLP.

use crate::config::ModelConfig;
use crate::encoder::{
    cross_attention_block, init_matrix, init_matrix_std, init_transformer_block, init_zeros,
};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, ParamStore};

/// Centers start near zero so the first assignment logits are near-uniform
/// and no center starves before the cross-attention has learned anything.
pub const CENTER_STD: f64 = 0.02;

/// Hard/soft patch-to-center assignment, `N×L` each. Every `hard` row is
/// one-hot; gradients pass through `hard` as if it were `soft`.
#[derive(Debug, Clone, Copy)]
pub struct MappingMatrix {
    pub hard: NodeId,
    pub soft: NodeId,
    pub logits: NodeId,
}

impl MappingMatrix {
    /// Center index of each patch, from the hard matrix.
    pub fn assignments(&self, g: &Graph) -> Vec<usize> {
        let d = g.data(self.hard);
        let l = g.shape(self.hard)[1];
        d.chunks(l)
            .map(|row| row.iter().position(|&v| v == 1.0).expect("one-hot row"))
            .collect()
    }

    /// Patches per center, from the hard matrix.
    pub fn center_counts(&self, g: &Graph) -> Vec<usize> {
        let l = g.shape(self.hard)[1];
        let mut counts = vec![0usize; l];
        for a in self.assignments(g) {
            counts[a] += 1;
        }
        counts
    }
}

pub fn init_group_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<()> {
    init_matrix_std(store, "group.centers", cfg.centers, cfg.hidden, CENTER_STD, rng)?;
    for i in 0..cfg.cross_attn_depth {
        init_transformer_block(store, &format!("group.cross{i}"), cfg.hidden, rng)?;
    }
    init_matrix(store, "group.pool_mlp.w1", cfg.hidden, cfg.hidden, rng)?;
    init_zeros(store, "group.pool_mlp.b1", vec![cfg.hidden])?;
    init_matrix(store, "group.pool_mlp.w2", cfg.hidden, cfg.hidden, rng)?;
    init_zeros(store, "group.pool_mlp.b2", vec![cfg.hidden])
}

/// Contextualize the center bank against patch features through
/// `cross_attn_depth` blocks (centers query, patches key/value). Depth 0
/// returns the raw centers.
pub fn contextualize_centers(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    patches: NodeId,
) -> Result<NodeId> {
    let mut centers = g.param(store, "group.centers")?;
    for i in 0..cfg.cross_attn_depth {
        centers = cross_attention_block(g, store, &format!("group.cross{i}"), centers, patches, cfg.heads)?;
    }
    Ok(centers)
}

/// Assignment logits are the raw patch-center inner products; the hard/soft
/// pair comes from the straight-through Gumbel-Softmax.
pub fn compute_assignment(
    g: &mut Graph,
    patches: NodeId,
    centers_ctx: NodeId,
    temperature: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<MappingMatrix> {
    let ct = g.transpose(centers_ctx)?;
    let logits = g.matmul(patches, ct)?;
    let (hard, soft) = g.gumbel_softmax_hard(logits, temperature, rng, training)?;
    Ok(MappingMatrix { hard, soft, logits })
}

/// Per-center mean of the patches assigned to it; empty centers pool to the
/// zero vector. Returns `L×H`.
///
/// `assign` is normally the hard matrix; the differentiable surrogate passes
/// the soft matrix while keeping the hard counts, so the pooled value stays a
/// smooth function of its inputs wherever the argmax does not flip.
pub fn pooled_means(g: &mut Graph, assign: NodeId, counts: &[usize], patches: NodeId) -> Result<NodeId> {
    let at = g.transpose(assign)?;
    let sums = g.matmul(at, patches)?;
    let inv: Vec<f64> = counts.iter().map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 }).collect();
    g.row_scale_const(sums, &inv)
}

/// Region representations: `MLP(pooled + contextual_centers)` with a GELU
/// between the two linear layers.
pub fn pool_regions(
    g: &mut Graph,
    store: &ParamStore,
    mapping_assign: NodeId,
    counts: &[usize],
    patches: NodeId,
    centers_ctx: NodeId,
) -> Result<NodeId> {
    let pooled = pooled_means(g, mapping_assign, counts, patches)?;
    let mixed = g.add(pooled, centers_ctx)?;
    let w1 = g.param(store, "group.pool_mlp.w1")?;
    let b1 = g.param(store, "group.pool_mlp.b1")?;
    let w2 = g.param(store, "group.pool_mlp.w2")?;
    let b2 = g.param(store, "group.pool_mlp.b2")?;
    let h = g.matmul(mixed, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h)?;
    let out = g.matmul(h, w2)?;
    g.add_row(out, b2)
}

/// Full grouping pass: contextualize, assign, pool. Returns the region
/// matrix and the mapping.
pub fn group_patches(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    patches: NodeId,
    rng: &mut Rng,
    training: bool,
    soft_assignment: bool,
) -> Result<(NodeId, MappingMatrix)> {
    let centers_ctx = contextualize_centers(g, store, cfg, patches)?;
    let mapping = compute_assignment(g, patches, centers_ctx, cfg.gumbel_temperature, rng, training)?;
    let counts = mapping.center_counts(g);
    let assign = if soft_assignment { mapping.soft } else { mapping.hard };
    let regions = pool_regions(g, store, assign, &counts, patches, centers_ctx)?;
    Ok((regions, mapping))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_small(centers: usize, depth: usize) -> ModelConfig {
        ModelConfig {
            hidden: 8,
            heads: 2,
            centers,
            cross_attn_depth: depth,
            ..Default::default()
        }
    }

    fn store_for(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        init_group_params(&mut store, cfg, &mut rng).unwrap();
        store
    }

    #[test]
    fn depth_zero_returns_centers_unchanged() {
        let cfg = cfg_small(3, 0);
        let store = store_for(&cfg, 1);
        let mut g = Graph::new();
        let patches = g.constant(vec![5, 8], vec![0.1; 40]).unwrap();
        let out = contextualize_centers(&mut g, &store, &cfg, patches).unwrap();
        assert_eq!(g.data(out), store.get("group.centers").unwrap().data.as_slice());
    }

    #[test]
    fn contextualized_shape_is_centers_by_hidden() {
        let cfg = cfg_small(4, 2);
        let store = store_for(&cfg, 2);
        for n in [1, 7, 33] {
            let mut g = Graph::new();
            let patches = g.constant(vec![n, 8], vec![0.2; n * 8]).unwrap();
            let out = contextualize_centers(&mut g, &store, &cfg, patches).unwrap();
            assert_eq!(g.shape(out), &[4, 8]);
        }
    }

    #[test]
    fn eval_assignment_is_argmax_of_logits() {
        let mut g = Graph::new();
        // Centers = identity basis so logits equal the patch coordinates.
        let centers = g.constant(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let patches = g
            .constant(vec![3, 3], vec![2.0, 0.0, 9.0, 0.0, 2.0, 9.0, 5.0, 1.0, 9.0])
            .unwrap();
        let mut rng = Rng::new(3);
        let m = compute_assignment(&mut g, patches, centers, 1.0, &mut rng, false).unwrap();
        assert_eq!(g.data(m.logits), &[2.0, 0.0, 0.0, 2.0, 5.0, 1.0]);
        assert_eq!(g.data(m.hard), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn hard_column_sums_are_center_counts() {
        let cfg = cfg_small(4, 1);
        let store = store_for(&cfg, 5);
        let mut rng = Rng::new(8);
        let n = 24;
        let data: Vec<f64> = (0..n * 8).map(|_| rng.normal()).collect();
        let mut g = Graph::new();
        let patches = g.constant(vec![n, 8], data).unwrap();
        let centers = contextualize_centers(&mut g, &store, &cfg, patches).unwrap();
        let m = compute_assignment(&mut g, patches, centers, 1.0, &mut rng, true).unwrap();
        let counts = m.center_counts(&g);
        assert_eq!(counts.iter().sum::<usize>(), n);
        let hard = g.data(m.hard);
        for (k, &c) in counts.iter().enumerate() {
            let col: f64 = (0..n).map(|j| hard[j * 4 + k]).sum();
            assert_eq!(col as usize, c);
        }
    }

    #[test]
    fn orthogonal_setup_assigns_each_patch_to_aligned_center() {
        let mut g = Graph::new();
        let l = 4;
        let mut basis = vec![0.0; l * l];
        for i in 0..l {
            basis[i * l + i] = 1.0;
        }
        let centers = g.constant(vec![l, l], basis.clone()).unwrap();
        // Patches follow the basis rows cyclically with positive scale.
        let n = 9;
        let mut pdata = vec![0.0; n * l];
        for j in 0..n {
            pdata[j * l + (j % l)] = 1.0 + j as f64 * 0.1;
        }
        let patches = g.constant(vec![n, l], pdata).unwrap();
        let mut rng = Rng::new(1);
        let m = compute_assignment(&mut g, patches, centers, 1.0, &mut rng, false).unwrap();
        assert_eq!(
            m.assignments(&g),
            (0..n).map(|j| j % l).collect::<Vec<_>>()
        );
    }

    #[test]
    fn pooled_means_match_group_by_mean_oracle() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let (n, l, h) = (6, 3, 5);
            let pdata: Vec<f64> = (0..n * h).map(|_| rng.normal()).collect();
            let assigns: Vec<usize> = (0..n).map(|_| rng.below(l)).collect();
            let mut hard = vec![0.0; n * l];
            for (j, &a) in assigns.iter().enumerate() {
                hard[j * l + a] = 1.0;
            }
            let mut counts = vec![0usize; l];
            for &a in &assigns {
                counts[a] += 1;
            }

            let mut g = Graph::new();
            let patches = g.constant(vec![n, h], pdata.clone()).unwrap();
            let hard_n = g.constant(vec![n, l], hard).unwrap();
            let pooled = pooled_means(&mut g, hard_n, &counts, patches).unwrap();

            // Brute-force group-by-mean.
            let mut want = vec![0.0; l * h];
            for k in 0..l {
                let members: Vec<usize> = (0..n).filter(|&j| assigns[j] == k).collect();
                if members.is_empty() {
                    continue;
                }
                for c in 0..h {
                    let s: f64 = members.iter().map(|&j| pdata[j * h + c]).sum();
                    want[k * h + c] = s / members.len() as f64;
                }
            }
            for (a, b) in g.data(pooled).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_center_pools_to_mlp_of_context_row() {
        let cfg = cfg_small(3, 0);
        let store = store_for(&cfg, 7);
        let h = cfg.hidden;
        let n = 4;
        let mut g = Graph::new();
        let mut rngv = Rng::new(2);
        let pdata: Vec<f64> = (0..n * h).map(|_| rngv.normal()).collect();
        let patches = g.constant(vec![n, h], pdata).unwrap();
        // All patches to center 0; centers 1, 2 empty.
        let mut hard = vec![0.0; n * 3];
        for j in 0..n {
            hard[j * 3] = 1.0;
        }
        let hard_n = g.constant(vec![n, 3], hard).unwrap();
        let centers_ctx = contextualize_centers(&mut g, &store, &cfg, patches).unwrap();
        let regions =
            pool_regions(&mut g, &store, hard_n, &[n, 0, 0], patches, centers_ctx).unwrap();

        // Rebuild the empty-center rows: MLP(0 + center_row).
        let mut g2 = Graph::new();
        let centers_only = g2.param(&store, "group.centers").unwrap();
        let w1 = g2.param(&store, "group.pool_mlp.w1").unwrap();
        let b1 = g2.param(&store, "group.pool_mlp.b1").unwrap();
        let w2 = g2.param(&store, "group.pool_mlp.w2").unwrap();
        let b2 = g2.param(&store, "group.pool_mlp.b2").unwrap();
        let t = g2.matmul(centers_only, w1).unwrap();
        let t = g2.add_row(t, b1).unwrap();
        let t = g2.gelu(t).unwrap();
        let t = g2.matmul(t, w2).unwrap();
        let want = g2.add_row(t, b2).unwrap();

        for k in [1usize, 2] {
            for c in 0..h {
                assert!((g.data(regions)[k * h + c] - g2.data(want)[k * h + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patch_permutation_permutes_logits_and_preserves_pooling() {
        let cfg = cfg_small(3, 0);
        let store = store_for(&cfg, 11);
        let h = cfg.hidden;
        let n = 6;
        let mut rngv = Rng::new(4);
        let pdata: Vec<f64> = (0..n * h).map(|_| rngv.normal()).collect();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted: Vec<f64> = perm.iter().flat_map(|&j| pdata[j * h..(j + 1) * h].to_vec()).collect();

        let run = |data: Vec<f64>| {
            let mut g = Graph::new();
            let patches = g.constant(vec![n, h], data).unwrap();
            let centers = contextualize_centers(&mut g, &store, &cfg, patches).unwrap();
            let mut rng = Rng::new(0);
            let m = compute_assignment(&mut g, patches, centers, 1.0, &mut rng, false).unwrap();
            let counts = m.center_counts(&g);
            let pooled = pooled_means(&mut g, m.hard, &counts, patches).unwrap();
            (g.data(m.logits).to_vec(), g.data(pooled).to_vec())
        };
        let (logits_a, pooled_a) = run(pdata.clone());
        let (logits_b, pooled_b) = run(permuted);

        let l = cfg.centers;
        for (new_row, &old_row) in perm.iter().enumerate() {
            assert_eq!(&logits_b[new_row * l..(new_row + 1) * l], &logits_a[old_row * l..(old_row + 1) * l]);
        }
        for (a, b) in pooled_a.iter().zip(&pooled_b) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_grouping_is_deterministic() {
        let cfg = cfg_small(4, 1);
        let store = store_for(&cfg, 21);
        let run = || {
            let mut g = Graph::new();
            let mut rngv = Rng::new(6);
            let pdata: Vec<f64> = (0..10 * 8).map(|_| rngv.normal()).collect();
            let patches = g.constant(vec![10, 8], pdata).unwrap();
            let mut rng = Rng::new(999);
            let (regions, m) = group_patches(&mut g, &store, &cfg, patches, &mut rng, false, false).unwrap();
            (g.data(regions).to_vec(), g.data(m.hard).to_vec())
        };
        assert_eq!(run(), run());
    }
}
