//! Training: losses, pseudo-label generation, the recorded differentiable
//! forward pass, gradient verification, and the two-phase Adam loop.

use crate::autodiff::{Tape, Var};
use crate::embed::lookup_pixels;
use crate::geom::{derive_matching, GraphError, LineGraph, Matching, Point, RasterImage};
use crate::model::{AffineParams, ModelParams};
use crate::reposefuse::points_tensor;
use crate::tensor::Tensor;
use crate::vectorize::binarize;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Floor applied to plan entries before their log in the correspondence loss.
const PLAN_FLOOR: f64 = 1e-12;
/// Probability clamp for the visibility cross-entropy.
const PROB_CLAMP: f64 = 1e-7;

/// Which loss terms a forward pass emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Correspondence loss only (early epochs).
    CorrespondenceOnly,
    /// Correspondence + repositioning + visibility.
    Full,
}

/// Optimizer and schedule settings. Defaults follow the reference recipe:
/// Adam at 1e-4, 70 epochs with the first 50 on the correspondence loss
/// alone, gradient accumulation over 8 frame pairs, visibility bias weight
/// 0.2.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs_total: usize,
    pub epochs_phase1: usize,
    pub accumulation_steps: usize,
    pub bias_weight: f64,
    /// Inclusive frame-gap range for pair sampling; only odd gaps are used
    /// so the center frame needed for visibility labels exists.
    pub gap_min: usize,
    pub gap_max: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs_total: 70,
            epochs_phase1: 50,
            accumulation_steps: 8,
            bias_weight: 0.2,
            gap_min: 1,
            gap_max: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs_phase1 > self.epochs_total {
            return Err(format!(
                "epochs_phase1 {} exceeds epochs_total {}",
                self.epochs_phase1, self.epochs_total
            ));
        }
        if self.accumulation_steps == 0 {
            return Err("accumulation_steps must be >= 1".into());
        }
        if !(self.bias_weight > 0.0 && self.bias_weight < 1.0) {
            return Err(format!("bias_weight {} outside (0, 1)", self.bias_weight));
        }
        if self.gap_min > self.gap_max {
            return Err("gap_min exceeds gap_max".into());
        }
        Ok(())
    }
}

/// One graph frame with its raster.
#[derive(Debug, Clone)]
pub struct FrameData {
    pub graph: LineGraph,
    pub image: RasterImage,
}

/// A training pair with all supervision attached.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub g0: LineGraph,
    pub g1: LineGraph,
    pub i0: RasterImage,
    pub i1: RasterImage,
    pub gt: Matching,
    /// Cached spectral embeddings (they depend only on topology).
    pub spec0: Tensor,
    pub spec1: Tensor,
    /// Full-gap pseudo shift labels per direction.
    pub r01_gt: Tensor,
    pub r10_gt: Tensor,
    /// Visibility labels against the dilated center frame.
    pub m0_gt: Vec<bool>,
    pub m1_gt: Vec<bool>,
    pub gap: usize,
}

/// Loss values of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub correspondence: f64,
    pub reposition: f64,
    pub visibility: f64,
    pub total: f64,
    pub gt_pairs: usize,
    /// Set when the sample had no ground-truth pairs and the
    /// correspondence loss degenerated to zero.
    pub no_gt_pairs: bool,
}

/// Correspondence loss: mean negative log plan value over ground-truth
/// pairs, with plan entries floored at 1e-12. An empty ground truth yields
/// loss 0 and a raised flag.
pub fn loss_correspondence(plan: &crate::correspond::TransportPlan, gt: &Matching) -> (f64, bool) {
    if gt.pairs.is_empty() {
        return (0.0, true);
    }
    let sum: f64 = gt
        .pairs
        .iter()
        .map(|&(i, j)| plan.matrix.at2(i, j).max(PLAN_FLOOR).ln())
        .sum();
    (-(sum / gt.pairs.len() as f64), false)
}

/// Mean-per-vertex L1 distance between a predicted and a label shift field
/// (one direction).
pub fn loss_reposition(r_pred: &Tensor, r_gt: &Tensor) -> f64 {
    assert_eq!(r_pred.shape, r_gt.shape);
    let k = r_pred.shape[0];
    if k == 0 {
        return 0.0;
    }
    let sum: f64 = r_pred
        .data
        .iter()
        .zip(&r_gt.data)
        .map(|(&a, &b)| (a - b).abs())
        .sum();
    sum / k as f64
}

fn bce_weighted(logits: &[f64], targets: &[bool], w: f64) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| {
            let p = (1.0 / (1.0 + (-z).exp())).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let yf = if y { 1.0 } else { 0.0 };
            w * yf * p.ln() + (1.0 - w) * (1.0 - yf) * (1.0 - p).ln()
        })
        .sum();
    -(sum / logits.len() as f64)
}

/// Visibility loss: bias-weighted binary cross-entropy summed over both
/// graphs; `w` multiplies the visible (positive) term.
pub fn loss_visibility(
    logits_0: &[f64],
    logits_1: &[f64],
    m_gt_0: &[bool],
    m_gt_1: &[bool],
    w: f64,
) -> f64 {
    bce_weighted(logits_0, m_gt_0, w) + bce_weighted(logits_1, m_gt_1, w)
}

/// Backtrack a shift field from the last frame of `sequence` down to the
/// first.
///
/// The shift at the last frame is zero. Stepping backward, a vertex matched
/// into the next frame accumulates its exact displacement plus the next
/// frame's shift at the counterpart; an unmatched vertex takes the mean of
/// its already-assigned neighbors, relaxed Jacobi-style to a fixpoint
/// (at most 100 sweeps, 1e-6 max-change stop). Vertices that never see an
/// assigned neighbor get zero. Returns the frame-0 field.
pub fn backtrack_pseudo_shift(sequence: &[LineGraph]) -> Result<Tensor, GraphError> {
    assert!(sequence.len() >= 2, "need at least two frames");
    let last = &sequence[sequence.len() - 1];
    let mut r_next: Vec<[f64; 2]> = vec![[0.0, 0.0]; last.vertex_count()];
    for z in (0..sequence.len() - 1).rev() {
        let g = &sequence[z];
        let gn = &sequence[z + 1];
        let matching = derive_matching(g, gn)?;
        let k = g.vertex_count();
        let mut value: Vec<Option<[f64; 2]>> = vec![None; k];
        for &(i, j) in &matching.pairs {
            value[i] = Some([
                gn.vertices[j].x - g.vertices[i].x + r_next[j][0],
                gn.vertices[j].y - g.vertices[i].y + r_next[j][1],
            ]);
        }
        let adjacency = g.adjacency();
        let unmatched: Vec<usize> = (0..k).filter(|&i| matching.occluded_0[i]).collect();
        for _sweep in 0..100 {
            let mut next = value.clone();
            let mut max_change = 0.0f64;
            for &i in &unmatched {
                let mut sum = [0.0f64; 2];
                let mut count = 0usize;
                for &n in &adjacency[i] {
                    if let Some(v) = value[n] {
                        sum[0] += v[0];
                        sum[1] += v[1];
                        count += 1;
                    }
                }
                if count > 0 {
                    let mean = [sum[0] / count as f64, sum[1] / count as f64];
                    let change = match value[i] {
                        Some(old) => (mean[0] - old[0]).abs().max((mean[1] - old[1]).abs()),
                        None => f64::INFINITY,
                    };
                    max_change = max_change.max(change);
                    next[i] = Some(mean);
                }
            }
            value = next;
            if max_change < 1e-6 {
                break;
            }
        }
        r_next = value.into_iter().map(|v| v.unwrap_or([0.0, 0.0])).collect();
    }
    let mut out = Tensor::zeros(&[r_next.len(), 2]);
    for (i, v) in r_next.iter().enumerate() {
        out.data[i * 2] = v[0];
        out.data[i * 2 + 1] = v[1];
    }
    Ok(out)
}

/// Visibility pseudo labels: a vertex is visible when its half-gap
/// destination pixel lands on a line pixel of the (binarized, 3x3-dilated)
/// center frame; out-of-bounds destinations are hidden.
pub fn pseudo_visibility(v0: &[Point], r_half: &Tensor, i_t: &RasterImage) -> Vec<bool> {
    assert_eq!(r_half.shape[0], v0.len());
    let mask = binarize(i_t).dilate3x3();
    v0.iter()
        .enumerate()
        .map(|(i, p)| {
            let dest = Point::new(p.x + r_half.at2(i, 0), p.y + r_half.at2(i, 1));
            let (px, py) = dest.round_pixel();
            px >= 0
                && py >= 0
                && px < mask.width as i64
                && py < mask.height as i64
                && mask.at(px as u32, py as u32)
        })
        .collect()
}

/// Assemble one supervised pair from consecutive frames of a labeled
/// sequence. `start` and `end` index the two key frames; `end - start` must
/// be even (odd frame gap) so the center frame exists.
pub fn build_sample(
    frames: &[FrameData],
    start: usize,
    end: usize,
    spectral_dim: usize,
) -> Result<TrainSample, GraphError> {
    assert!(end > start && end < frames.len());
    assert_eq!((end - start) % 2, 0, "center frame must exist");
    let center = start + (end - start) / 2;
    let g0 = frames[start].graph.clone();
    let g1 = frames[end].graph.clone();
    let gt = derive_matching(&g0, &g1)?;
    let forward: Vec<LineGraph> = frames[start..=end].iter().map(|f| f.graph.clone()).collect();
    let backward: Vec<LineGraph> = frames[start..=end]
        .iter()
        .rev()
        .map(|f| f.graph.clone())
        .collect();
    let r01_gt = backtrack_pseudo_shift(&forward)?;
    let r10_gt = backtrack_pseudo_shift(&backward)?;
    let r0t_gt = backtrack_pseudo_shift(
        &frames[start..=center]
            .iter()
            .map(|f| f.graph.clone())
            .collect::<Vec<_>>(),
    )?;
    let r1t_gt = backtrack_pseudo_shift(
        &frames[center..=end]
            .iter()
            .rev()
            .map(|f| f.graph.clone())
            .collect::<Vec<_>>(),
    )?;
    let m0_gt = pseudo_visibility(&g0.vertices, &r0t_gt, &frames[center].image);
    let m1_gt = pseudo_visibility(&g1.vertices, &r1t_gt, &frames[center].image);
    let spec0 = crate::geom::spectral_embedding(&g0, spectral_dim);
    let spec1 = crate::geom::spectral_embedding(&g1, spectral_dim);
    Ok(TrainSample {
        i0: frames[start].image.clone(),
        i1: frames[end].image.clone(),
        g0,
        g1,
        gt,
        spec0,
        spec1,
        r01_gt,
        r10_gt,
        m0_gt,
        m1_gt,
        gap: end - start - 1,
    })
}

struct BoundAffine {
    w: Var,
    b: Var,
}

struct BoundQkv {
    q: BoundAffine,
    k: BoundAffine,
    v: BoundAffine,
}

struct BoundLayer {
    self_attn: BoundQkv,
    cross_attn: BoundQkv,
}

struct BoundParams {
    conv: [(Var, Var); 3],
    pos: (BoundAffine, BoundAffine),
    topo: (BoundAffine, BoundAffine),
    layers: Vec<BoundLayer>,
    alpha: Var,
    vis: (BoundAffine, BoundAffine, BoundAffine),
    named: Vec<(String, Var)>,
}

fn bind_affine(
    tape: &Tape,
    named: &mut Vec<(String, Var)>,
    name: &str,
    p: &AffineParams,
) -> BoundAffine {
    let w = tape.param(p.w.clone());
    let b = tape.param(p.b.clone());
    named.push((format!("{name}.w"), w));
    named.push((format!("{name}.b"), b));
    BoundAffine { w, b }
}

fn bind_params(tape: &Tape, params: &ModelParams) -> BoundParams {
    let mut named = Vec::new();
    let mut conv = Vec::new();
    for (i, c) in [&params.embed.conv1, &params.embed.conv2, &params.embed.conv3]
        .iter()
        .enumerate()
    {
        let w = tape.param(c.w.clone());
        let b = tape.param(c.b.clone());
        named.push((format!("embed.conv{}.w", i + 1), w));
        named.push((format!("embed.conv{}.b", i + 1), b));
        conv.push((w, b));
    }
    let pos = (
        bind_affine(tape, &mut named, "embed.pos.l1", &params.embed.pos_mlp.l1),
        bind_affine(tape, &mut named, "embed.pos.l2", &params.embed.pos_mlp.l2),
    );
    let topo = (
        bind_affine(tape, &mut named, "embed.topo.l1", &params.embed.topo_mlp.l1),
        bind_affine(tape, &mut named, "embed.topo.l2", &params.embed.topo_mlp.l2),
    );
    let mut layers = Vec::new();
    for (i, layer) in params.attention.layers.iter().enumerate() {
        let bind_qkv =
            |role: &str, qkv: &crate::model::QkvParams, named: &mut Vec<(String, Var)>| BoundQkv {
                q: bind_affine(tape, named, &format!("attn.{i}.{role}.q"), &qkv.q),
                k: bind_affine(tape, named, &format!("attn.{i}.{role}.k"), &qkv.k),
                v: bind_affine(tape, named, &format!("attn.{i}.{role}.v"), &qkv.v),
            };
        layers.push(BoundLayer {
            self_attn: bind_qkv("self", &layer.self_attn, &mut named),
            cross_attn: bind_qkv("cross", &layer.cross_attn, &mut named),
        });
    }
    let alpha = tape.param(params.attention.dustbin_alpha.clone());
    named.push(("attn.alpha".to_string(), alpha));
    let vis = (
        bind_affine(tape, &mut named, "vis.l1", &params.visibility.l1),
        bind_affine(tape, &mut named, "vis.l2", &params.visibility.l2),
        bind_affine(tape, &mut named, "vis.l3", &params.visibility.l3),
    );
    BoundParams {
        conv: [conv[0], conv[1], conv[2]],
        pos,
        topo,
        layers,
        alpha,
        vis,
        named,
    }
}

/// A recorded forward pass: loss values plus gradient retrieval for every
/// parameter tensor (zeros for parameters outside the traced graph).
pub struct Trace {
    tape: Tape,
    loss: Var,
    plan: Var,
    parts: LossParts,
    named: Vec<(String, Var)>,
    shapes: BTreeMap<String, Vec<usize>>,
}

impl Trace {
    pub fn loss(&self) -> f64 {
        self.parts.total
    }

    pub fn parts(&self) -> LossParts {
        self.parts
    }

    /// The transport plan value recorded in this trace.
    pub fn plan_matrix(&self) -> Tensor {
        self.tape.value(self.plan).clone()
    }

    /// Gradient of the total loss for every parameter tensor by name.
    pub fn gradients(&self) -> BTreeMap<String, Tensor> {
        let grads = self.tape.backward(self.loss);
        self.named
            .iter()
            .map(|(name, var)| {
                let g = match grads.get_opt(*var) {
                    Some(t) => t.clone(),
                    None => Tensor::zeros(&self.shapes[name]),
                };
                (name.clone(), g)
            })
            .collect()
    }
}

fn tape_mlp2(tape: &Tape, x: Var, l1: &BoundAffine, l2: &BoundAffine) -> Var {
    let h = tape.affine(x, l1.w, l1.b);
    let h = tape.relu(h);
    tape.affine(h, l2.w, l2.b)
}

fn tape_attention(tape: &Tape, fa: Var, fb: Var, qkv: &BoundQkv, inv_sqrt_c: f64) -> Var {
    let q = tape.affine(fa, qkv.q.w, qkv.q.b);
    let k = tape.affine(fb, qkv.k.w, qkv.k.b);
    let v = tape.affine(fb, qkv.v.w, qkv.v.b);
    let scores = tape.matmul(q, k, false, true);
    let scores = tape.scale(scores, inv_sqrt_c);
    let weights = tape.row_softmax(scores);
    let pooled = tape.matmul(weights, v, false, false);
    tape.add(fa, pooled)
}

fn tape_embed(
    tape: &Tape,
    bound: &BoundParams,
    graph: &LineGraph,
    image: &RasterImage,
    spectral: &Tensor,
) -> Var {
    let input = tape.constant(Tensor::from_vec(
        &[1, image.height as usize, image.width as usize],
        image.data.clone(),
    ));
    let h1 = tape.conv2d(input, bound.conv[0].0, bound.conv[0].1);
    let h1 = tape.relu(h1);
    let h2 = tape.conv2d(h1, bound.conv[1].0, bound.conv[1].1);
    let h2 = tape.relu(h2);
    let map = tape.conv2d(h2, bound.conv[2].0, bound.conv[2].1);
    let pixels = lookup_pixels(&graph.vertices, image.width as usize, image.height as usize)
        .expect("graph invariants keep vertices inside the image");
    let ctx = tape.gather_map(map, pixels);
    let coords = tape.constant(
        crate::embed::normalized_coords(&graph.vertices, graph.width, graph.height)
            .expect("canvas at least 2x2"),
    );
    let pos = tape_mlp2(tape, coords, &bound.pos.0, &bound.pos.1);
    let spec = tape.constant(spectral.clone());
    let topo = tape_mlp2(tape, spec, &bound.topo.0, &bound.topo.1);
    let sum = tape.add(ctx, pos);
    tape.add(sum, topo)
}

fn tape_sinkhorn(tape: &Tape, scores: Var, alpha: Var, k0: usize, k1: usize, iters: usize) -> Var {
    let aug = tape.augment_dustbin(scores, alpha);
    let mut log_a = Tensor::zeros(&[k0 + 1]);
    log_a.data[k0] = (k1 as f64).ln();
    let mut log_b = Tensor::zeros(&[k1 + 1]);
    log_b.data[k1] = (k0 as f64).ln();
    let log_a = tape.constant(log_a);
    let log_b = tape.constant(log_b);
    let mut u = tape.constant(Tensor::zeros(&[k0 + 1]));
    let mut v = tape.constant(Tensor::zeros(&[k1 + 1]));
    for _ in 0..iters {
        let with_v = tape.add_rowwise(aug, v);
        let lse_rows = tape.logsumexp_rows(with_v);
        u = tape.sub(log_a, lse_rows);
        let with_u = tape.add_colwise(aug, u);
        let lse_cols = tape.logsumexp_cols(with_u);
        v = tape.sub(log_b, lse_cols);
    }
    let z = tape.add_colwise(aug, u);
    let z = tape.add_rowwise(z, v);
    tape.exp(z)
}

fn tape_visibility_logits(tape: &Tape, f: Var, vis: &(BoundAffine, BoundAffine, BoundAffine)) -> Var {
    let h1 = tape.affine(f, vis.0.w, vis.0.b);
    let h1 = tape.relu(h1);
    let h2 = tape.affine(h1, vis.1.w, vis.1.b);
    let h2 = tape.relu(h2);
    tape.affine(h2, vis.2.w, vis.2.b)
}

fn tape_bce(tape: &Tape, logits: Var, targets: &[bool], w: f64) -> Var {
    let k = targets.len();
    let prob = tape.sigmoid(logits);
    let prob = tape.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let y = tape.constant(Tensor::from_fn(&[k, 1], |i| if targets[i] { 1.0 } else { 0.0 }));
    let ones = tape.constant(Tensor::from_fn(&[k, 1], |_| 1.0));
    let log_p = tape.log(prob);
    let one_minus_p = tape.sub(ones, prob);
    let log_1p = tape.log(one_minus_p);
    let pos = tape.mul(y, log_p);
    let pos = tape.scale(pos, w);
    let neg_y = tape.sub(ones, y);
    let neg = tape.mul(neg_y, log_1p);
    let neg = tape.scale(neg, 1.0 - w);
    let combined = tape.add(pos, neg);
    let mean = tape.mean(combined);
    tape.scale(mean, -1.0)
}

/// Record the full forward pass and losses for one sample.
///
/// Phase 1 emits the correspondence loss only; phase 2 adds the
/// repositioning and visibility terms. Both graphs must be non-empty.
pub fn forward_loss(
    sample: &TrainSample,
    params: &ModelParams,
    phase: Phase,
    bias_weight: f64,
) -> Trace {
    let (k0, k1) = (sample.g0.vertex_count(), sample.g1.vertex_count());
    assert!(k0 > 0 && k1 > 0, "training samples must be non-empty");
    let c = params.config.feature_dim as f64;
    let inv_sqrt_c = 1.0 / c.sqrt();
    let tape = Tape::new();
    let bound = bind_params(&tape, params);
    let mut shapes = BTreeMap::new();
    params.for_each_tensor(|name, t| {
        shapes.insert(name.to_string(), t.shape.clone());
    });

    let f0 = tape_embed(&tape, &bound, &sample.g0, &sample.i0, &sample.spec0);
    let f1 = tape_embed(&tape, &bound, &sample.g1, &sample.i1, &sample.spec1);
    let (mut a, mut b) = (f0, f1);
    for layer in &bound.layers {
        a = tape_attention(&tape, a, a, &layer.self_attn, inv_sqrt_c);
        b = tape_attention(&tape, b, b, &layer.self_attn, inv_sqrt_c);
        let a2 = tape_attention(&tape, a, b, &layer.cross_attn, inv_sqrt_c);
        let b2 = tape_attention(&tape, b, a, &layer.cross_attn, inv_sqrt_c);
        a = a2;
        b = b2;
    }
    let scores = tape.matmul(a, b, false, true);
    let scores = tape.scale(scores, inv_sqrt_c);
    let plan = tape_sinkhorn(
        &tape,
        scores,
        bound.alpha,
        k0,
        k1,
        params.config.sinkhorn_iterations,
    );

    let (l_c, no_gt_pairs) = if sample.gt.pairs.is_empty() {
        log::warn!("sample without ground-truth pairs: correspondence loss is 0");
        (tape.constant(Tensor::scalar(0.0)), true)
    } else {
        let vals = tape.gather_pairs(plan, sample.gt.pairs.clone());
        let floored = tape.clamp(vals, PLAN_FLOOR, f64::INFINITY);
        let logs = tape.log(floored);
        let mean = tape.mean(logs);
        (tape.scale(mean, -1.0), false)
    };

    let mut parts = LossParts {
        correspondence: tape.scalar_value(l_c),
        reposition: 0.0,
        visibility: 0.0,
        total: 0.0,
        gt_pairs: sample.gt.pairs.len(),
        no_gt_pairs,
    };

    let loss = match phase {
        Phase::CorrespondenceOnly => l_c,
        Phase::Full => {
            // Propagated shifts: feature self-similarity pooling of
            // softmax-expected counterpart displacements, in both directions.
            let scores_t = tape.matmul(b, a, false, true);
            let scores_t = tape.scale(scores_t, inv_sqrt_c);
            let v0 = tape.constant(points_tensor(&sample.g0.vertices));
            let v1 = tape.constant(points_tensor(&sample.g1.vertices));
            let direction = |fa: Var, scores: Var, va: Var, vb: Var| {
                let w = tape.row_softmax(scores);
                let gathered = tape.matmul(w, vb, false, false);
                let target = tape.sub(gathered, va);
                let sim = tape.matmul(fa, fa, false, true);
                let sim = tape.scale(sim, inv_sqrt_c);
                let pool = tape.row_softmax(sim);
                tape.matmul(pool, target, false, false)
            };
            let r01 = direction(a, scores, v0, v1);
            let r10 = direction(b, scores_t, v1, v0);
            let l_r = {
                let gt01 = tape.constant(sample.r01_gt.clone());
                let gt10 = tape.constant(sample.r10_gt.clone());
                let d0 = tape.sub(r01, gt01);
                let d0 = tape.abs(d0);
                let s0 = tape.sum(d0);
                let s0 = tape.scale(s0, 1.0 / k0 as f64);
                let d1 = tape.sub(r10, gt10);
                let d1 = tape.abs(d1);
                let s1 = tape.sum(d1);
                let s1 = tape.scale(s1, 1.0 / k1 as f64);
                tape.add(s0, s1)
            };
            let logits0 = tape_visibility_logits(&tape, a, &bound.vis);
            let logits1 = tape_visibility_logits(&tape, b, &bound.vis);
            let bce0 = tape_bce(&tape, logits0, &sample.m0_gt, bias_weight);
            let bce1 = tape_bce(&tape, logits1, &sample.m1_gt, bias_weight);
            let l_m = tape.add(bce0, bce1);
            parts.reposition = tape.scalar_value(l_r);
            parts.visibility = tape.scalar_value(l_m);
            let sum = tape.add(l_c, l_r);
            tape.add(sum, l_m)
        }
    };
    parts.total = tape.scalar_value(loss);
    Trace {
        tape,
        loss,
        plan,
        parts,
        named: bound.named,
        shapes,
    }
}

/// Compare analytic gradients against central finite differences.
///
/// Every parameter coordinate is checked when there are at most 2,500 of
/// them; otherwise a seeded random subsample of 200 coordinates is used.
/// Returns the maximum relative error
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check(
    params: &ModelParams,
    sample: &TrainSample,
    phase: Phase,
    bias_weight: f64,
    eps: f64,
) -> f64 {
    let trace = forward_loss(sample, params, phase, bias_weight);
    let grads = trace.gradients();
    drop(trace);
    let mut coords: Vec<(String, usize)> = Vec::new();
    params.for_each_tensor(|name, t| {
        for i in 0..t.len() {
            coords.push((name.to_string(), i));
        }
    });
    if coords.len() > 2_500 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15);
        coords.shuffle(&mut rng);
        coords.truncate(200);
    }
    let mut worst = 0.0f64;
    for (name, idx) in coords {
        let numeric = {
            let probe = |delta: f64| {
                let mut p = params.clone();
                p.for_each_tensor_mut(|n, t| {
                    if n == name {
                        t.data[idx] += delta;
                    }
                });
                forward_loss(sample, &p, phase, bias_weight).loss()
            };
            (probe(eps) - probe(-eps)) / (2.0 * eps)
        };
        let analytic = grads[&name].data[idx];
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Adam with bias correction; one state slot per named parameter tensor.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: &TrainConfig) -> Self {
        Adam {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        params.for_each_tensor_mut(|name, tensor| {
            let g = &grads[name];
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(&tensor.shape));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(&tensor.shape));
            for i in 0..tensor.len() {
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * g.data[i];
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * g.data[i] * g.data[i];
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                tensor.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        });
    }
}

/// One optimizer-step row of the training log (losses averaged over the
/// accumulation window).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: usize,
    pub l_c: f64,
    pub l_r: f64,
    pub l_m: f64,
    pub total: f64,
}

pub fn write_loss_csv(
    rows: &[TrainLogRow],
    path: impl AsRef<std::path::Path>,
) -> std::io::Result<()> {
    let mut out = String::from("epoch,step,L_c,L_r,L_m,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.step, r.l_c, r.l_r, r.l_m, r.total
        ));
    }
    std::fs::write(path, out)
}

/// Train on the given samples with the two-phase schedule.
///
/// One frame pair per forward pass; Adam updates every
/// `accumulation_steps` samples on the averaged gradients. Sample order is
/// reshuffled per epoch from the seed, so the run is fully deterministic.
pub fn train(
    samples: &[TrainSample],
    params: ModelParams,
    config: &TrainConfig,
) -> (ModelParams, Vec<TrainLogRow>) {
    train_with_progress(samples, params, config, |_| {})
}

/// [`train`] with a per-step callback (progress reporting).
pub fn train_with_progress(
    samples: &[TrainSample],
    mut params: ModelParams,
    config: &TrainConfig,
    mut on_step: impl FnMut(&TrainLogRow),
) -> (ModelParams, Vec<TrainLogRow>) {
    assert!(!samples.is_empty(), "dataset must be non-empty");
    config.validate().expect("invalid train config");
    let mut adam = Adam::new(config);
    let mut log_rows = Vec::new();
    let mut accum: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut accum_count = 0usize;
    let mut window = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut step = 0usize;
    for epoch in 0..config.epochs_total {
        let phase = if epoch < config.epochs_phase1 {
            Phase::CorrespondenceOnly
        } else {
            Phase::Full
        };
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        for &idx in &order {
            let sample = &samples[idx];
            let trace = forward_loss(sample, &params, phase, config.bias_weight);
            let parts = trace.parts();
            let grads = trace.gradients();
            drop(trace);
            for (name, g) in grads {
                match accum.get_mut(&name) {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(&g.data) {
                            *a += b;
                        }
                    }
                    None => {
                        accum.insert(name, g);
                    }
                }
            }
            accum_count += 1;
            window.0 += parts.correspondence;
            window.1 += parts.reposition;
            window.2 += parts.visibility;
            window.3 += parts.total;
            if accum_count == config.accumulation_steps {
                let scale = 1.0 / accum_count as f64;
                for g in accum.values_mut() {
                    for v in g.data.iter_mut() {
                        *v *= scale;
                    }
                }
                adam.step(&mut params, &accum);
                step += 1;
                let n = accum_count as f64;
                let row = TrainLogRow {
                    epoch,
                    step,
                    l_c: window.0 / n,
                    l_r: window.1 / n,
                    l_m: window.2 / n,
                    total: window.3 / n,
                };
                on_step(&row);
                log_rows.push(row);
                accum.clear();
                accum_count = 0;
                window = (0.0, 0.0, 0.0, 0.0);
            }
        }
    }
    (params, log_rows)
}
