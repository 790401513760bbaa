//! Training objectives: symmetric contrastive loss over cosine similarities,
//! masked-patch reconstruction (assembled in [`crate::model`]), and the
//! superpixel consistency loss — a symmetric KL between each patch's
//! assignment distribution and the average distribution of its super-patch.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::superpixel::PatchGroups;
use crate::tensor::{Graph, NodeId};

/// Floor added inside logarithms of the KL terms.
const KL_LOG_FLOOR: f64 = 1e-12;

/// Which patches the reconstruction encoder may see.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub masked: Vec<bool>,
    pub mask_rate: f64,
    /// Original patch index of each kept (visible) position, increasing.
    pub unmasked_index: Vec<usize>,
    /// Sorted indices of hidden patches.
    pub masked_index: Vec<usize>,
}

impl MaskPlan {
    pub fn num_masked(&self) -> usize {
        self.masked_index.len()
    }
}

/// Uniform random subset of `round(mask_rate·n)` patches, without
/// replacement, deterministic given the generator state.
pub fn plan_mask(n: usize, mask_rate: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::InvalidConfig(format!("mask_rate {mask_rate} must lie in (0, 1)")));
    }
    let count = (mask_rate * n as f64).round() as usize;
    if count == 0 || count == n {
        return Err(Error::InvalidConfig(format!(
            "mask_rate {mask_rate} on {n} patches masks {count} — nothing to reconstruct from"
        )));
    }
    let mut masked = vec![false; n];
    for i in rng.sample_without_replacement(n, count) {
        masked[i] = true;
    }
    let unmasked_index: Vec<usize> = (0..n).filter(|&i| !masked[i]).collect();
    let masked_index: Vec<usize> = (0..n).filter(|&i| masked[i]).collect();
    Ok(MaskPlan { masked, mask_rate, unmasked_index, masked_index })
}

/// Symmetric cross-entropy over cosine similarities of matched text/image
/// pairs. `logit_scale`, when given, multiplies the similarity matrix before
/// the softmaxes (a learnable temperature).
pub fn contrastive_loss(
    g: &mut Graph,
    text_feats: NodeId,
    image_feats: NodeId,
    logit_scale: Option<NodeId>,
) -> Result<NodeId> {
    let shape = g.shape(text_feats).to_vec();
    if shape.len() != 2 || g.shape(image_feats) != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "contrastive_loss",
            detail: format!("{:?} vs {:?}", shape, g.shape(image_feats)),
        });
    }
    let (b, h) = (shape[0], shape[1]);
    for (name, feats) in [("text", text_feats), ("image", image_feats)] {
        for (i, row) in g.data(feats).chunks(h).enumerate() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>();
            if norm.sqrt() < 1e-15 {
                return Err(Error::InvalidInput(format!(
                    "zero-norm {name} feature at row {i}; cosine similarity undefined"
                )));
            }
        }
    }

    let tn = g.normalize_rows(text_feats)?;
    let im = g.normalize_rows(image_feats)?;
    let imt = g.transpose(im)?;
    // sims[i][j] = s(text_i, image_j)
    let sims = g.matmul(tn, imt)?;
    let scaled = match logit_scale {
        Some(s) => g.mul_scalar(sims, s)?,
        None => sims,
    };

    let mut eye = vec![0.0; b * b];
    for i in 0..b {
        eye[i * b + i] = 1.0;
    }
    let eye = g.constant(vec![b, b], eye)?;

    // text→image: for image column i, softmax over text rows (axis 0);
    // image→text: for text row i, softmax over image columns (axis 1).
    let ls_t2i = g.log_softmax(scaled, 0)?;
    let diag_t2i = g.mul(ls_t2i, eye)?;
    let sum_t2i = g.sum_all(diag_t2i)?;
    let l_t2i = g.scale(sum_t2i, -1.0 / b as f64)?;

    let ls_i2t = g.log_softmax(scaled, 1)?;
    let diag_i2t = g.mul(ls_i2t, eye)?;
    let sum_i2t = g.sum_all(diag_i2t)?;
    let l_i2t = g.scale(sum_i2t, -1.0 / b as f64)?;

    let both = g.add(l_t2i, l_i2t)?;
    g.scale(both, 0.5)
}

/// Symmetric KL consistency loss over the soft assignment matrix `P` (`N×L`
/// rows summing to 1). Each row is pulled toward the softmax of its
/// super-patch's average row:
/// `(1/2N) Σ_j KL(P_j ‖ P̂_j) + KL(P̂_j ‖ P_j)`.
pub fn superpixel_kl_loss(g: &mut Graph, soft: NodeId, groups: &PatchGroups) -> Result<NodeId> {
    let shape = g.shape(soft).to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "superpixel_kl_loss",
            detail: format!("expected N×L, got {shape:?}"),
        });
    }
    let (n, l) = (shape[0], shape[1]);
    if groups.groups.len() != n {
        return Err(Error::InvalidInput(format!(
            "{n} assignment rows but {} patch groups",
            groups.groups.len()
        )));
    }
    for (j, row) in g.data(soft).chunks(l).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "assignment row {j} sums to {s}, not a distribution"
            )));
        }
    }

    // Group-averaging matrix: row j holds 1/|G_j| over the members of G_j.
    let mut avg = vec![0.0; n * n];
    for (j, members) in groups.groups.iter().enumerate() {
        let w = 1.0 / members.len() as f64;
        for &jj in members {
            avg[j * n + jj] = w;
        }
    }
    let avg = g.constant(vec![n, n], avg)?;
    let mean_rows = g.matmul(avg, soft)?;
    let target = g.softmax(mean_rows, 1)?;

    let ln_p = g.ln_eps(soft, KL_LOG_FLOOR)?;
    let ln_q = g.ln_eps(target, KL_LOG_FLOOR)?;
    let p_minus_q = g.sub(ln_p, ln_q)?;
    let kl_pq = g.mul(soft, p_minus_q)?;
    let kl_pq = g.sum_all(kl_pq)?;
    let q_minus_p = g.sub(ln_q, ln_p)?;
    let kl_qp = g.mul(target, q_minus_p)?;
    let kl_qp = g.sum_all(kl_qp)?;
    let total = g.add(kl_pq, kl_qp)?;
    g.scale(total, 1.0 / (2.0 * n as f64))
}

/// Per-step loss components. `total` is `(con + rec) + sup` in that exact
/// order every run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub con: f64,
    pub rec: f64,
    pub sup: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(con: f64, rec: f64, sup: f64) -> Self {
        LossBreakdown { con, rec, sup, total: (con + rec) + sup }
    }

    pub fn is_finite(&self) -> bool {
        self.con.is_finite() && self.rec.is_finite() && self.sup.is_finite() && self.total.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_plan_counts_and_partition() {
        let mut rng = Rng::new(1);
        let plan = plan_mask(64, 0.75, &mut rng).unwrap();
        assert_eq!(plan.num_masked(), 48);
        assert_eq!(plan.unmasked_index.len(), 16);
        let mut all: Vec<usize> = plan.unmasked_index.iter().chain(&plan.masked_index).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
        assert!(plan.unmasked_index.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn mask_plan_deterministic_per_seed() {
        let a = plan_mask(32, 0.5, &mut Rng::new(9)).unwrap();
        let b = plan_mask(32, 0.5, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_mask_rates_rejected() {
        assert!(plan_mask(10, 0.01, &mut Rng::new(0)).is_err()); // rounds to 0
        assert!(plan_mask(10, 0.99, &mut Rng::new(0)).is_err()); // rounds to 10
        assert!(plan_mask(10, 1.5, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn contrastive_single_sample_is_zero() {
        let mut g = Graph::new();
        let zw = g.constant(vec![1, 3], vec![0.3, -0.4, 0.9]).unwrap();
        let zp = g.constant(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let l = contrastive_loss(&mut g, zw, zp, None).unwrap();
        assert!(g.scalar_value(l).abs() < 1e-15);
    }

    #[test]
    fn identical_features_give_ln_b() {
        for b in [2usize, 4, 8] {
            let mut g = Graph::new();
            let row = vec![0.2, -0.7, 0.5, 0.1];
            let data: Vec<f64> = row.iter().cycle().take(4 * b).copied().collect();
            let zw = g.constant(vec![b, 4], data.clone()).unwrap();
            let zp = g.constant(vec![b, 4], data).unwrap();
            let l = contrastive_loss(&mut g, zw, zp, None).unwrap();
            assert!((g.scalar_value(l) - (b as f64).ln()).abs() < 1e-9, "B = {b}");
        }
    }

    #[test]
    fn orthogonal_pairs_beat_uniform() {
        // Matched pairs aligned, mismatched pairs orthogonal: both softmax
        // directions put e/(e+1) on the diagonal, hand-derived below.
        let mut g = Graph::new();
        let zw = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zp = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = contrastive_loss(&mut g, zw, zp, None).unwrap();
        let want = -(1.0f64.exp() / (1.0f64.exp() + 1.0)).ln();
        assert!((g.scalar_value(l) - want).abs() < 1e-12);
        assert!(g.scalar_value(l) < 2.0f64.ln());
    }

    #[test]
    fn cosine_makes_loss_scale_invariant() {
        let mut rng = Rng::new(5);
        let data: Vec<f64> = (0..4 * 6).map(|_| rng.normal()).collect();
        let data2: Vec<f64> = (0..4 * 6).map(|_| rng.normal()).collect();
        let run = |factor: f64| {
            let mut g = Graph::new();
            let zw = g.constant(vec![4, 6], data.iter().map(|v| v * factor).collect()).unwrap();
            let zp = g.constant(vec![4, 6], data2.clone()).unwrap();
            let l = contrastive_loss(&mut g, zw, zp, None).unwrap();
            g.scalar_value(l)
        };
        let (a, b) = (run(1.0), run(3.7));
        assert!((a - b).abs() / a.abs().max(1e-300) < 1e-12);
    }

    #[test]
    fn zero_norm_feature_is_invalid_input() {
        let mut g = Graph::new();
        let zw = g.constant(vec![2, 3], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let zp = g.constant(vec![2, 3], vec![1.0; 6]).unwrap();
        assert!(matches!(
            contrastive_loss(&mut g, zw, zp, None),
            Err(Error::InvalidInput(_))
        ));
    }

    fn singleton_groups(n: usize) -> PatchGroups {
        PatchGroups {
            patch_labels: (0..n as u32).collect(),
            groups: (0..n).map(|j| vec![j]).collect(),
        }
    }

    #[test]
    fn kl_zero_for_uniform_rows_any_grouping() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let (n, l) = (6, 4);
            let uniform = vec![1.0 / l as f64; n * l];
            // Random grouping: random labels, grouped by equality.
            let labels: Vec<u32> = (0..n).map(|_| rng.below(3) as u32).collect();
            let groups = PatchGroups {
                groups: (0..n)
                    .map(|j| (0..n).filter(|&jj| labels[jj] == labels[j]).collect())
                    .collect(),
                patch_labels: labels,
            };
            let mut g = Graph::new();
            let soft = g.constant(vec![n, l], uniform).unwrap();
            let loss = superpixel_kl_loss(&mut g, soft, &groups).unwrap();
            assert!(g.scalar_value(loss).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_singleton_uniform_is_zero() {
        let mut g = Graph::new();
        let soft = g.constant(vec![2, 2], vec![0.5; 4]).unwrap();
        let loss = superpixel_kl_loss(&mut g, soft, &singleton_groups(2)).unwrap();
        assert!(g.scalar_value(loss).abs() < 1e-9);
    }

    #[test]
    fn kl_matches_scalar_oracle_on_two_patch_case() {
        // P rows [0.9, 0.1] and [0.1, 0.9], one shared group.
        let p: [[f64; 2]; 2] = [[0.9, 0.1], [0.1, 0.9]];
        // Oracle: direct scalar evaluation. Average row = [0.5, 0.5];
        // softmax keeps it uniform; then the symmetric KL per row.
        let qhat = {
            let avg = [0.5f64, 0.5];
            let m = avg[0].max(avg[1]);
            let e: Vec<f64> = avg.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            [e[0] / z, e[1] / z]
        };
        let mut want = 0.0;
        for row in &p {
            for k in 0..2 {
                want += row[k] * ((row[k] + 1e-12).ln() - (qhat[k] + 1e-12).ln());
                want += qhat[k] * ((qhat[k] + 1e-12).ln() - (row[k] + 1e-12).ln());
            }
        }
        want /= 2.0 * 2.0;

        let groups = PatchGroups {
            patch_labels: vec![0, 0],
            groups: vec![vec![0, 1], vec![0, 1]],
        };
        let mut g = Graph::new();
        let soft = g.constant(vec![2, 2], vec![0.9, 0.1, 0.1, 0.9]).unwrap();
        let loss = superpixel_kl_loss(&mut g, soft, &groups).unwrap();
        assert!((g.scalar_value(loss) - want).abs() < 1e-9);
        assert!(want > 0.0);
    }

    #[test]
    fn kl_nonnegative_on_random_inputs() {
        let mut rng = Rng::new(11);
        for _ in 0..200 {
            let (n, l) = (1 + rng.below(6), 2 + rng.below(4));
            let mut data = vec![0.0; n * l];
            for row in data.chunks_mut(l) {
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = rng.uniform_open();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            let labels: Vec<u32> = (0..n).map(|_| rng.below(2) as u32).collect();
            let groups = PatchGroups {
                groups: (0..n)
                    .map(|j| (0..n).filter(|&jj| labels[jj] == labels[j]).collect())
                    .collect(),
                patch_labels: labels,
            };
            let mut g = Graph::new();
            let soft = g.constant(vec![n, l], data).unwrap();
            let loss = superpixel_kl_loss(&mut g, soft, &groups).unwrap();
            assert!(g.scalar_value(loss) >= -1e-12);
        }
    }

    #[test]
    fn kl_rejects_unnormalized_rows() {
        let mut g = Graph::new();
        let soft = g.constant(vec![1, 2], vec![0.9, 0.3]).unwrap();
        assert!(matches!(
            superpixel_kl_loss(&mut g, soft, &singleton_groups(1)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn breakdown_sums_components() {
        let b = LossBreakdown::new(1.0, 2.0, 0.5);
        assert_eq!(b.total, 3.5);
        let con_only = LossBreakdown::new(0.8, 0.0, 0.0);
        assert_eq!(con_only.total, con_only.con);
    }
}
