//! Vertex correspondence: alternating self/cross attention, the correlation
//! matrix, differentiable optimal transport with a dustbin, and mutual
//! argmax matching.

use crate::embed::VertexFeatures;
use crate::geom::Matching;
use crate::model::{AttentionParams, QkvParams};
use crate::tensor::{self, Tensor};

/// Raw K0×K1 correlation scores between two vertex feature sets.
pub type ScoreMatrix = Tensor;

/// Optimal-transport-normalized correspondence scores.
///
/// `matrix` is `(K0+1) x (K1+1)`; the extra row and column are the dustbin
/// that absorbs occluded vertices. After enough iterations every non-dustbin
/// row and column sums to 1, which bounds all entries outside the
/// dustbin/dustbin corner by 1 (the corner itself absorbs the marginal
/// surplus and may exceed 1). The raw pre-transport scores are kept because
/// shift propagation pools over them.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub matrix: Tensor,
    pub iterations: usize,
    pub scores: ScoreMatrix,
    pub alpha: f64,
}

impl TransportPlan {
    pub fn k0(&self) -> usize {
        self.matrix.shape[0] - 1
    }

    pub fn k1(&self) -> usize {
        self.matrix.shape[1] - 1
    }

    /// Largest deviation of any non-dustbin row/column sum from 1.
    pub fn marginal_error(&self) -> f64 {
        let (r, c) = (self.matrix.shape[0], self.matrix.shape[1]);
        let mut worst = 0.0f64;
        for i in 0..r - 1 {
            let sum: f64 = self.matrix.row(i).iter().sum();
            worst = worst.max((sum - 1.0).abs());
        }
        for j in 0..c - 1 {
            let mut sum = 0.0;
            for i in 0..r {
                sum += self.matrix.at2(i, j);
            }
            worst = worst.max((sum - 1.0).abs());
        }
        worst
    }

    /// Entry bounds: all entries non-negative, and at most 1 outside the
    /// dustbin/dustbin corner.
    pub fn entries_in_unit_range(&self, tol: f64) -> bool {
        let (r, c) = (self.matrix.shape[0], self.matrix.shape[1]);
        for i in 0..r {
            for j in 0..c {
                let v = self.matrix.at2(i, j);
                if v < -tol {
                    return false;
                }
                if (i + 1 < r || j + 1 < c) && v > 1.0 + tol {
                    return false;
                }
            }
        }
        true
    }
}

fn attention(fa: &Tensor, fb: &Tensor, qkv: &QkvParams) -> Tensor {
    let c = fa.shape[1] as f64;
    let q = tensor::affine(fa, &qkv.q.w, &qkv.q.b);
    let k = tensor::affine(fb, &qkv.k.w, &qkv.k.b);
    let v = tensor::affine(fb, &qkv.v.w, &qkv.v.b);
    let mut scores = tensor::matmul(&q, false, &k, true);
    let inv_sqrt_c = 1.0 / c.sqrt();
    for s in scores.data.iter_mut() {
        *s *= inv_sqrt_c;
    }
    let weights = tensor::row_softmax(&scores);
    let pooled = tensor::matmul(&weights, false, &v, false);
    tensor::zip_binary(fa, &pooled, |a, b| a + b)
}

/// One self-attention step with a residual connection:
/// `F + softmax(Q(F)·K(F)ᵀ/√C)·V(F)`.
pub fn self_attention(f: &VertexFeatures, qkv: &QkvParams) -> VertexFeatures {
    attention(f, f, qkv)
}

/// One cross-attention step: queries from `fa`, keys and values from `fb`,
/// residual onto `fa`.
pub fn cross_attention(fa: &VertexFeatures, fb: &VertexFeatures, qkv: &QkvParams) -> VertexFeatures {
    attention(fa, fb, qkv)
}

/// N alternating rounds of [self on each stream, then symmetric cross].
///
/// Both streams share each layer's weights, and the cross step reads the
/// post-self (pre-cross) features of the other stream so the architecture is
/// symmetric: swapping the inputs swaps the outputs. An empty layer list is
/// the identity.
pub fn aggregate(
    f0: &VertexFeatures,
    f1: &VertexFeatures,
    params: &AttentionParams,
) -> (VertexFeatures, VertexFeatures) {
    let mut a = f0.clone();
    let mut b = f1.clone();
    if a.shape[0] == 0 || b.shape[0] == 0 {
        return (a, b);
    }
    for layer in &params.layers {
        a = self_attention(&a, &layer.self_attn);
        b = self_attention(&b, &layer.self_attn);
        let a2 = cross_attention(&a, &b, &layer.cross_attn);
        let b2 = cross_attention(&b, &a, &layer.cross_attn);
        a = a2;
        b = b2;
    }
    (a, b)
}

/// Correlation matrix `P = F̂0 · F̂1ᵀ / √C`.
pub fn correlation(f0: &VertexFeatures, f1: &VertexFeatures) -> ScoreMatrix {
    assert_eq!(f0.shape[1], f1.shape[1], "feature dims differ");
    let c = f0.shape[1] as f64;
    let mut p = tensor::matmul(f0, false, f1, true);
    let inv_sqrt_c = 1.0 / c.sqrt();
    for v in p.data.iter_mut() {
        *v *= inv_sqrt_c;
    }
    p
}

/// Augment scores with a constant dustbin row/column.
pub fn augment_with_dustbin(scores: &ScoreMatrix, alpha: f64) -> Tensor {
    let (r, c) = (scores.shape[0], scores.shape[1]);
    let mut out = Tensor::zeros(&[r + 1, c + 1]);
    for i in 0..r {
        out.data[i * (c + 1)..i * (c + 1) + c].copy_from_slice(&scores.data[i * c..(i + 1) * c]);
        out.data[i * (c + 1) + c] = alpha;
    }
    for j in 0..=c {
        out.data[r * (c + 1) + j] = alpha;
    }
    out
}

/// Log-domain Sinkhorn normalization of the dustbin-augmented scores.
///
/// Target marginals in counts: each real row and column sums to 1, the
/// dustbin row to K1 and the dustbin column to K0. One iteration is a row
/// pass followed by a column pass. Returns the exponentiated plan. Empty
/// inputs yield an all-zero plan.
pub fn sinkhorn_ot(scores: &ScoreMatrix, alpha: f64, iters: usize) -> TransportPlan {
    assert!(iters >= 1);
    let (k0, k1) = (scores.shape[0], scores.shape[1]);
    if k0 == 0 || k1 == 0 {
        return TransportPlan {
            matrix: Tensor::zeros(&[k0 + 1, k1 + 1]),
            iterations: iters,
            scores: scores.clone(),
            alpha,
        };
    }
    let aug = augment_with_dustbin(scores, alpha);
    let (r, c) = (k0 + 1, k1 + 1);
    let mut log_a = vec![0.0f64; r];
    log_a[k0] = (k1 as f64).ln();
    let mut log_b = vec![0.0f64; c];
    log_b[k1] = (k0 as f64).ln();
    let mut u = vec![0.0f64; r];
    let mut v = vec![0.0f64; c];
    let mut row_buf = vec![0.0f64; c];
    for _ in 0..iters {
        for i in 0..r {
            for j in 0..c {
                row_buf[j] = aug.at2(i, j) + v[j];
            }
            u[i] = log_a[i] - tensor::logsumexp_slice(&row_buf);
        }
        let mut col_max = vec![f64::NEG_INFINITY; c];
        for i in 0..r {
            for j in 0..c {
                let z = aug.at2(i, j) + u[i];
                if z > col_max[j] {
                    col_max[j] = z;
                }
            }
        }
        let mut col_sum = vec![0.0f64; c];
        for i in 0..r {
            for j in 0..c {
                col_sum[j] += (aug.at2(i, j) + u[i] - col_max[j]).exp();
            }
        }
        for j in 0..c {
            v[j] = log_b[j] - (col_max[j] + col_sum[j].ln());
        }
    }
    let mut matrix = Tensor::zeros(&[r, c]);
    for i in 0..r {
        for j in 0..c {
            matrix.data[i * c + j] = (aug.at2(i, j) + u[i] + v[j]).exp();
        }
    }
    TransportPlan {
        matrix,
        iterations: iters,
        scores: scores.clone(),
        alpha,
    }
}

/// Mutual argmax matching over the plan with threshold `theta`.
///
/// A pair `(i, j)` survives when `j` is the argmax of row `i` over real
/// columns, `i` is the argmax of column `j` over real rows, and the plan
/// value exceeds `theta`. Argmax ties break toward the lowest index;
/// unmatched vertices are occluded.
pub fn mutual_match(plan: &TransportPlan, theta: f64) -> Matching {
    assert!((0.0..1.0).contains(&theta));
    let (k0, k1) = (plan.k0(), plan.k1());
    if k0 == 0 || k1 == 0 {
        return Matching::from_pairs(Vec::new(), k0, k1);
    }
    let m = &plan.matrix;
    let mut pairs = Vec::new();
    let mut col_argmax = vec![0usize; k1];
    for j in 0..k1 {
        let mut best = 0;
        for i in 1..k0 {
            if m.at2(i, j) > m.at2(best, j) {
                best = i;
            }
        }
        col_argmax[j] = best;
    }
    for i in 0..k0 {
        let mut best = 0;
        for j in 1..k1 {
            if m.at2(i, j) > m.at2(i, best) {
                best = j;
            }
        }
        if col_argmax[best] == i && m.at2(i, best) > theta {
            pairs.push((i, best));
        }
    }
    Matching::from_pairs(pairs, k0, k1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};
    use rand::prelude::*;

    fn params(c: usize, n: usize, seed: u64) -> ModelParams {
        ModelParams::init(
            ModelConfig {
                feature_dim: c,
                attention_layers: n,
                spectral_dim: 4,
                ..ModelConfig::default()
            },
            seed,
        )
    }

    fn random_features(rng: &mut impl Rng, k: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[k, c], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_vertex_self_attention_is_residual_value() {
        let p = params(4, 1, 2);
        let qkv = &p.attention.layers[0].self_attn;
        let f = Tensor::from_vec(&[1, 4], vec![0.5, -0.3, 0.8, 0.1]);
        let out = self_attention(&f, qkv);
        let v = tensor::affine(&f, &qkv.v.w, &qkv.v.b);
        for i in 0..4 {
            assert!((out.data[i] - (f.data[i] + v.data[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_query_key_gives_uniform_pooling() {
        let mut p = params(4, 1, 2);
        let qkv = &mut p.attention.layers[0].self_attn;
        for t in [&mut qkv.q.w, &mut qkv.q.b, &mut qkv.k.w, &mut qkv.k.b] {
            for v in t.data.iter_mut() {
                *v = 0.0;
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let f = random_features(&mut rng, 5, 4);
        let out = self_attention(&f, &p.attention.layers[0].self_attn);
        let v = tensor::affine(&f, &p.attention.layers[0].self_attn.v.w, &p.attention.layers[0].self_attn.v.b);
        for i in 0..5 {
            for c in 0..4 {
                let mean: f64 = (0..5).map(|r| v.at2(r, c)).sum::<f64>() / 5.0;
                assert!((out.at2(i, c) - (f.at2(i, c) + mean)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_dense_oracle() {
        let p = params(6, 1, 3);
        let qkv = &p.attention.layers[0].self_attn;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let f = random_features(&mut rng, 5, 6);
        let out = self_attention(&f, qkv);
        // Dense oracle.
        let q = tensor::affine(&f, &qkv.q.w, &qkv.q.b);
        let k = tensor::affine(&f, &qkv.k.w, &qkv.k.b);
        let v = tensor::affine(&f, &qkv.v.w, &qkv.v.b);
        for i in 0..5 {
            let mut weights = vec![0.0; 5];
            for j in 0..5 {
                let mut dot = 0.0;
                for c in 0..6 {
                    dot += q.at2(i, c) * k.at2(j, c);
                }
                weights[j] = dot / (6.0f64).sqrt();
            }
            let mx = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for w in weights.iter_mut() {
                *w = (*w - mx).exp();
                sum += *w;
            }
            for c in 0..6 {
                let mut acc = 0.0;
                for j in 0..5 {
                    acc += weights[j] / sum * v.at2(j, c);
                }
                assert!((out.at2(i, c) - (f.at2(i, c) + acc)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_attention_to_single_vertex_collapses() {
        let p = params(4, 1, 7);
        let qkv = &p.attention.layers[0].cross_attn;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let fa = random_features(&mut rng, 4, 4);
        let fb = random_features(&mut rng, 1, 4);
        let out = cross_attention(&fa, &fb, qkv);
        let v = tensor::affine(&fb, &qkv.v.w, &qkv.v.b);
        for i in 0..4 {
            for c in 0..4 {
                assert!((out.at2(i, c) - (fa.at2(i, c) + v.at2(0, c))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_on_identical_inputs_equals_self_attention() {
        let p = params(4, 1, 9);
        let qkv = &p.attention.layers[0].self_attn;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let f = random_features(&mut rng, 3, 4);
        assert_eq!(self_attention(&f, qkv), cross_attention(&f, &f, qkv));
    }

    #[test]
    fn aggregate_with_no_layers_is_identity() {
        let mut p = params(4, 1, 11);
        p.attention.layers.clear();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let f0 = random_features(&mut rng, 3, 4);
        let f1 = random_features(&mut rng, 5, 4);
        let (a, b) = aggregate(&f0, &f1, &p.attention);
        assert_eq!(a, f0);
        assert_eq!(b, f1);
    }

    #[test]
    fn aggregate_is_symmetric_under_swap() {
        let p = params(6, 2, 13);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(14);
        let f0 = random_features(&mut rng, 4, 6);
        let f1 = random_features(&mut rng, 7, 6);
        let (a, b) = aggregate(&f0, &f1, &p.attention);
        let (b2, a2) = aggregate(&f1, &f0, &p.attention);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn aggregate_matches_step_by_step_composition() {
        let p = params(4, 2, 15);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(16);
        let f0 = random_features(&mut rng, 3, 4);
        let f1 = random_features(&mut rng, 4, 4);
        let (a, b) = aggregate(&f0, &f1, &p.attention);
        let (mut ea, mut eb) = (f0, f1);
        for layer in &p.attention.layers {
            ea = self_attention(&ea, &layer.self_attn);
            eb = self_attention(&eb, &layer.self_attn);
            let na = cross_attention(&ea, &eb, &layer.cross_attn);
            let nb = cross_attention(&eb, &ea, &layer.cross_attn);
            ea = na;
            eb = nb;
        }
        assert_eq!(a, ea);
        assert_eq!(b, eb);
    }

    #[test]
    fn correlation_examples() {
        let a = Tensor::from_vec(&[1, 1], vec![2.0]);
        let b = Tensor::from_vec(&[1, 1], vec![3.0]);
        assert_eq!(correlation(&a, &b).data, vec![6.0]);
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let p = correlation(&a, &b);
        assert_eq!(p.at2(0, 0), 0.0);
        assert_eq!(p.at2(1, 1), 0.0);
    }

    #[test]
    fn sinkhorn_1x1_zero_scores_zero_alpha_is_half_everywhere() {
        let scores = Tensor::zeros(&[1, 1]);
        let plan = sinkhorn_ot(&scores, 0.0, 1);
        for &v in &plan.matrix.data {
            assert!((v - 0.5).abs() < 1e-12, "{v}");
        }
        let converged = sinkhorn_ot(&scores, 0.0, 100);
        for &v in &converged.matrix.data {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn sinkhorn_marginals_hold_after_100_iterations() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20);
        for _ in 0..20 {
            let k0 = rng.gen_range(1..12);
            let k1 = rng.gen_range(1..12);
            let scores = Tensor::from_fn(&[k0, k1], |_| rng.gen_range(-2.0..2.0));
            let plan = sinkhorn_ot(&scores, 1.0, 100);
            assert!(plan.marginal_error() < 1e-6, "err {}", plan.marginal_error());
            assert!(plan.entries_in_unit_range(1e-9));
        }
    }

    #[test]
    fn sinkhorn_disabled_dustbin_gives_doubly_stochastic_core() {
        // With the dustbin score pushed toward -inf no real vertex can use
        // it, so the uniform 2x2 core converges to the doubly stochastic 0.5
        // plan while the forced dustbin marginal collects in the corner. The
        // degenerate uniform system converges like O(1/iters), hence the
        // higher iteration count here.
        let scores = Tensor::zeros(&[2, 2]);
        let plan = sinkhorn_ot(&scores, -50.0, 10_000);
        let core = plan.matrix.at2(0, 0);
        for i in 0..2 {
            for j in 0..2 {
                // Exact uniformity by symmetry.
                assert_eq!(plan.matrix.at2(i, j), core);
            }
            assert!(plan.matrix.at2(i, 2) < 1e-9);
        }
        assert!((core - 0.5).abs() < 1e-4, "{core}");
        assert!((plan.matrix.at2(2, 2) - 2.0).abs() < 1e-3);
    }

    #[test]
    fn mutual_match_strong_diagonal() {
        let plan = TransportPlan {
            matrix: Tensor::from_vec(
                &[3, 3],
                vec![0.9, 0.05, 0.05, 0.05, 0.8, 0.15, 0.05, 0.15, 0.8],
            ),
            iterations: 0,
            scores: Tensor::zeros(&[2, 2]),
            alpha: 0.0,
        };
        let m = mutual_match(&plan, 0.2);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.occluded_0, vec![false, false]);
        assert_eq!(m.occluded_1, vec![false, false]);
    }

    #[test]
    fn mutual_match_below_threshold_occludes_everything() {
        let plan = TransportPlan {
            matrix: Tensor::from_vec(
                &[3, 3],
                vec![0.15, 0.1, 0.7, 0.1, 0.12, 0.7, 0.7, 0.7, 0.2],
            ),
            iterations: 0,
            scores: Tensor::zeros(&[2, 2]),
            alpha: 0.0,
        };
        let m = mutual_match(&plan, 0.2);
        assert!(m.pairs.is_empty());
        assert!(m.occluded_0.iter().all(|&o| o));
    }

    #[test]
    fn mutual_match_equals_literal_double_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(30);
        for trial in 0..200 {
            let k0 = rng.gen_range(1..12);
            let k1 = rng.gen_range(1..12);
            // Quantized values force argmax ties.
            let matrix = Tensor::from_fn(&[k0 + 1, k1 + 1], |_| {
                rng.gen_range(0..6) as f64 / 5.0 * 0.9
            });
            let plan = TransportPlan {
                matrix,
                iterations: 0,
                scores: Tensor::zeros(&[k0, k1]),
                alpha: 0.0,
            };
            let theta = 0.2;
            let got = mutual_match(&plan, theta);
            // Literal forward/backward argmax with lowest-index ties.
            let mut expected = Vec::new();
            for i in 0..k0 {
                let mut jbest = 0;
                for j in 1..k1 {
                    if plan.matrix.at2(i, j) > plan.matrix.at2(i, jbest) {
                        jbest = j;
                    }
                }
                let mut ibest = 0;
                for i2 in 1..k0 {
                    if plan.matrix.at2(i2, jbest) > plan.matrix.at2(ibest, jbest) {
                        ibest = i2;
                    }
                }
                if ibest == i && plan.matrix.at2(i, jbest) > theta {
                    expected.push((i, jbest));
                }
            }
            assert_eq!(got.pairs, expected, "trial {trial}");
            // Partial injection: no vertex appears twice.
            let mut seen0 = std::collections::HashSet::new();
            let mut seen1 = std::collections::HashSet::new();
            for &(i, j) in &got.pairs {
                assert!(seen0.insert(i));
                assert!(seen1.insert(j));
            }
        }
    }

    #[test]
    fn raising_threshold_never_adds_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let k0 = rng.gen_range(1..10);
            let k1 = rng.gen_range(1..10);
            let scores = Tensor::from_fn(&[k0, k1], |_| rng.gen_range(-1.0..3.0));
            let plan = sinkhorn_ot(&scores, 1.0, 50);
            let low: std::collections::BTreeSet<_> =
                mutual_match(&plan, 0.1).pairs.into_iter().collect();
            let high: std::collections::BTreeSet<_> =
                mutual_match(&plan, 0.4).pairs.into_iter().collect();
            assert!(high.is_subset(&low));
        }
    }

    #[test]
    fn permuting_rows_permutes_plan_and_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(32);
        let k0 = 6;
        let k1 = 5;
        let f0 = random_features(&mut rng, k0, 4);
        let f1 = random_features(&mut rng, k1, 4);
        let mut perm: Vec<usize> = (0..k0).collect();
        perm.shuffle(&mut rng);
        let mut f0p = Tensor::zeros(&[k0, 4]);
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..4 {
                *f0p.at2_mut(new, c) = f0.at2(old, c);
            }
        }
        let p = correlation(&f0, &f1);
        let pp = correlation(&f0p, &f1);
        for (new, &old) in perm.iter().enumerate() {
            for j in 0..k1 {
                assert!((p.at2(old, j) - pp.at2(new, j)).abs() < 1e-12);
            }
        }
        let plan = sinkhorn_ot(&p, 1.0, 100);
        let planp = sinkhorn_ot(&pp, 1.0, 100);
        for (new, &old) in perm.iter().enumerate() {
            for j in 0..=k1 {
                assert!((plan.matrix.at2(old, j) - planp.matrix.at2(new, j)).abs() < 1e-9);
            }
        }
        let m: std::collections::BTreeSet<(usize, usize)> = mutual_match(&plan, 0.2)
            .pairs
            .into_iter()
            .collect();
        let mut inv = vec![0usize; k0];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mp: std::collections::BTreeSet<(usize, usize)> = mutual_match(&planp, 0.2)
            .pairs
            .into_iter()
            .map(|(i, j)| (i, j))
            .collect();
        let expected: std::collections::BTreeSet<(usize, usize)> =
            m.iter().map(|&(i, j)| (inv[i], j)).collect();
        assert_eq!(mp, expected);
    }

    #[test]
    fn empty_side_yields_empty_matching() {
        let scores = Tensor::zeros(&[0, 4]);
        let plan = sinkhorn_ot(&scores, 1.0, 10);
        let m = mutual_match(&plan, 0.2);
        assert!(m.pairs.is_empty());
        assert_eq!(m.occluded_1.len(), 4);
    }
}
