//! Vertex repositioning, visibility prediction, and graph fusion.

use crate::correspond::TransportPlan;
use crate::embed::VertexFeatures;
use crate::geom::{LineGraph, Matching, Point};
use crate::model::VisibilityParams;
use crate::tensor::{self, Tensor};
use std::collections::BTreeSet;

/// K×2 per-vertex shift vectors in pixels.
pub type RepositionField = Tensor;

/// Per-vertex visibility decisions with the raw logits kept for training.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityMask {
    pub visible: Vec<bool>,
    pub logits: Vec<f64>,
}

impl VisibilityMask {
    pub fn all_visible(k: usize) -> Self {
        VisibilityMask {
            visible: vec![true; k],
            logits: vec![0.0; k],
        }
    }
}

pub fn points_tensor(points: &[Point]) -> Tensor {
    let mut t = Tensor::zeros(&[points.len(), 2]);
    for (i, p) in points.iter().enumerate() {
        t.data[i * 2] = p.x;
        t.data[i * 2 + 1] = p.y;
    }
    t
}

/// Bidirectional shift propagation.
///
/// For each direction the expected counterpart position is pooled with a
/// row softmax over the plan's raw (pre-transport) scores, and the resulting
/// shift-to-counterpart field is smoothed by feature self-similarity
/// pooling: `r = softmax(F̂·F̂ᵀ/√C) · (softmax(P)·V_other − V_own)`. When the
/// other graph is empty the field is zero.
pub fn propagate_shifts(
    f0: &VertexFeatures,
    f1: &VertexFeatures,
    plan: &TransportPlan,
    v0: &[Point],
    v1: &[Point],
) -> (RepositionField, RepositionField) {
    let one_direction = |fa: &VertexFeatures, va: &[Point], vb: &[Point], scores: &Tensor| {
        let ka = va.len();
        if ka == 0 || vb.is_empty() {
            return Tensor::zeros(&[ka, 2]);
        }
        let c = fa.shape[1] as f64;
        let weights = tensor::row_softmax(scores);
        let vb_t = points_tensor(vb);
        let gathered = tensor::matmul(&weights, false, &vb_t, false);
        let va_t = points_tensor(va);
        let target = tensor::zip_binary(&gathered, &va_t, |g, v| g - v);
        let mut sim = tensor::matmul(fa, false, fa, true);
        let inv_sqrt_c = 1.0 / c.sqrt();
        for v in sim.data.iter_mut() {
            *v *= inv_sqrt_c;
        }
        let pool = tensor::row_softmax(&sim);
        tensor::matmul(&pool, false, &target, false)
    };
    let scores_t = {
        let (r, c) = (plan.scores.shape[0], plan.scores.shape[1]);
        let mut t = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                t.data[j * r + i] = plan.scores.at2(i, j);
            }
        }
        t
    };
    let r01 = one_direction(f0, v0, v1, &plan.scores);
    let r10 = one_direction(f1, v1, v0, &scores_t);
    (r01, r10)
}

/// Final per-vertex repositioning: matched vertices take the exact shift to
/// their counterpart, unmatched ones keep the propagated field.
pub fn final_repositioning(
    matching: &Matching,
    v0: &[Point],
    v1: &[Point],
    r_prop: &RepositionField,
) -> RepositionField {
    assert_eq!(r_prop.shape[0], v0.len());
    let mut out = r_prop.clone();
    for &(i, j) in &matching.pairs {
        out.data[i * 2] = v1[j].x - v0[i].x;
        out.data[i * 2 + 1] = v1[j].y - v0[i].y;
    }
    out
}

/// Visibility head: three affine layers with ReLU between, sigmoid on the
/// final logit, thresholded at `threshold`.
pub fn predict_visibility(
    f: &VertexFeatures,
    params: &VisibilityParams,
    threshold: f64,
) -> VisibilityMask {
    let h1 = tensor::map_unary(&tensor::affine(f, &params.l1.w, &params.l1.b), |v| v.max(0.0));
    let h2 = tensor::map_unary(&tensor::affine(&h1, &params.l2.w, &params.l2.b), |v| {
        v.max(0.0)
    });
    let logits_t = tensor::affine(&h2, &params.l3.w, &params.l3.b);
    let logits: Vec<f64> = logits_t.data.clone();
    let visible = logits
        .iter()
        .map(|&z| 1.0 / (1.0 + (-z).exp()) >= threshold)
        .collect();
    VisibilityMask { visible, logits }
}

/// Fuse two graphs into the intermediate frame at time `t`.
///
/// Matched pairs interpolate linearly; unmatched visible vertices move along
/// their repositioning field scaled by `t` (graph 0) or `1 − t` (graph 1).
/// An edge appears in the output iff both endpoints made it into the fused
/// vertex set and the endpoints were connected in either source graph
/// (matched pairs inherit edges from both sides). Coordinates are clamped to
/// the canvas and the output carries no ref_ids.
pub fn fuse(
    g0: &LineGraph,
    g1: &LineGraph,
    matching: &Matching,
    r0: &RepositionField,
    r1: &RepositionField,
    m0: &VisibilityMask,
    m1: &VisibilityMask,
    t: f64,
) -> LineGraph {
    assert!(t > 0.0 && t < 1.0, "t must lie in (0, 1)");
    assert_eq!(g0.width, g1.width);
    assert_eq!(g0.height, g1.height);
    let (k0, k1) = (g0.vertex_count(), g1.vertex_count());
    assert_eq!(r0.shape[0], k0);
    assert_eq!(r1.shape[0], k1);
    assert_eq!(m0.visible.len(), k0);
    assert_eq!(m1.visible.len(), k1);

    let mut fused = LineGraph::new(g0.width, g0.height);
    let clamp = |p: Point| {
        Point::new(
            p.x.clamp(0.0, g0.width as f64 - 1.0),
            p.y.clamp(0.0, g0.height as f64 - 1.0),
        )
    };
    let mut map0 = vec![None::<usize>; k0];
    let mut map1 = vec![None::<usize>; k1];
    for &(i, j) in &matching.pairs {
        let p = g0.vertices[i] * (1.0 - t) + g1.vertices[j] * t;
        map0[i] = Some(fused.vertices.len());
        map1[j] = Some(fused.vertices.len());
        fused.vertices.push(clamp(p));
    }
    for i in 0..k0 {
        if matching.occluded_0[i] && m0.visible[i] {
            let shift = Point::new(r0.at2(i, 0), r0.at2(i, 1));
            map0[i] = Some(fused.vertices.len());
            fused.vertices.push(clamp(g0.vertices[i] + shift * t));
        }
    }
    for j in 0..k1 {
        if matching.occluded_1[j] && m1.visible[j] {
            let shift = Point::new(r1.at2(j, 0), r1.at2(j, 1));
            map1[j] = Some(fused.vertices.len());
            fused.vertices.push(clamp(g1.vertices[j] + shift * (1.0 - t)));
        }
    }
    let mut edges = BTreeSet::new();
    for (graph, map) in [(g0, &map0), (g1, &map1)] {
        for &(a, b) in &graph.edges {
            if let (Some(na), Some(nb)) = (map[a], map[b]) {
                if na != nb {
                    edges.insert((na.min(nb), na.max(nb)));
                }
            }
        }
    }
    fused.edges = edges;
    fused
}
