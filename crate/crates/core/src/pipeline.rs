//! End-to-end inference: two key frames in, the intermediate graph out.

use crate::correspond::{aggregate, correlation, mutual_match, sinkhorn_ot, TransportPlan};
use crate::embed::{embed_vertices_ablated, EmbedError, EmbedToggles};
use crate::geom::{LineGraph, Matching, RasterImage};
use crate::model::ModelParams;
use crate::reposefuse::{final_repositioning, fuse, predict_visibility, propagate_shifts};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("intermediate time t={0} outside (0, 1)")]
    BadTime(f64),
}

/// Inference options; `t` is the intermediate time (0.5 = center frame).
#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions {
    pub t: f64,
    pub toggles: EmbedToggles,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            t: 0.5,
            toggles: EmbedToggles::default(),
        }
    }
}

/// Everything the pipeline produced for one frame pair.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub fused: LineGraph,
    pub matching: Matching,
    pub plan: TransportPlan,
}

/// Run the full correspondence + repositioning + fusion pipeline.
pub fn inbetween(
    g0: &LineGraph,
    g1: &LineGraph,
    i0: &RasterImage,
    i1: &RasterImage,
    params: &ModelParams,
    options: &PipelineOptions,
) -> Result<PipelineOutput, PipelineError> {
    if !(options.t > 0.0 && options.t < 1.0) {
        return Err(PipelineError::BadTime(options.t));
    }
    let config = &params.config;
    let f0 = embed_vertices_ablated(g0, i0, &params.embed, options.toggles)?;
    let f1 = embed_vertices_ablated(g1, i1, &params.embed, options.toggles)?;
    let (a, b) = aggregate(&f0, &f1, &params.attention);
    let scores = correlation(&a, &b);
    let plan = sinkhorn_ot(&scores, params.attention.alpha(), config.sinkhorn_iterations);
    let matching = mutual_match(&plan, config.match_threshold);
    let (r01, r10) = propagate_shifts(&a, &b, &plan, &g0.vertices, &g1.vertices);
    let r0 = final_repositioning(&matching, &g0.vertices, &g1.vertices, &r01);
    let r1 = final_repositioning(&matching.flipped(), &g1.vertices, &g0.vertices, &r10);
    let m0 = predict_visibility(&a, &params.visibility, config.visibility_threshold);
    let m1 = predict_visibility(&b, &params.visibility, config.visibility_threshold);
    let fused = fuse(g0, g1, &matching, &r0, &r1, &m0, &m1, options.t);
    Ok(PipelineOutput {
        fused,
        matching,
        plan,
    })
}

/// Predicted matching only (no fusion); used by accuracy evaluations.
pub fn predict_matching(
    g0: &LineGraph,
    g1: &LineGraph,
    i0: &RasterImage,
    i1: &RasterImage,
    params: &ModelParams,
    toggles: EmbedToggles,
) -> Result<Matching, PipelineError> {
    let f0 = embed_vertices_ablated(g0, i0, &params.embed, toggles)?;
    let f1 = embed_vertices_ablated(g1, i1, &params.embed, toggles)?;
    let (a, b) = aggregate(&f0, &f1, &params.attention);
    let scores = correlation(&a, &b);
    let plan = sinkhorn_ot(&scores, params.attention.alpha(), params.config.sinkhorn_iterations);
    Ok(mutual_match(&plan, params.config.match_threshold))
}

/// Fraction of ground-truth pairs the prediction reproduces, i.e. matching
/// accuracy over non-occluded vertices. `None` when the ground truth has no
/// pairs.
pub fn valid_accuracy(predicted: &Matching, ground_truth: &Matching) -> Option<f64> {
    if ground_truth.pairs.is_empty() {
        return None;
    }
    let predicted_map: std::collections::HashMap<usize, usize> =
        predicted.pairs.iter().cloned().collect();
    let correct = ground_truth
        .pairs
        .iter()
        .filter(|&&(i, j)| predicted_map.get(&i) == Some(&j))
        .count();
    Some(correct as f64 / ground_truth.pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point;
    use crate::model::ModelConfig;

    fn small_params() -> ModelParams {
        ModelParams::init(
            ModelConfig {
                feature_dim: 8,
                attention_layers: 1,
                spectral_dim: 4,
                sinkhorn_iterations: 30,
                ..ModelConfig::default()
            },
            3,
        )
    }

    fn chain_graph(offset: f64) -> LineGraph {
        let mut g = LineGraph::new(24, 24);
        for i in 0..4 {
            g.vertices
                .push(Point::new(4.0 + 4.0 * i as f64 + offset, 12.0));
        }
        for i in 1..4 {
            g.add_edge(i - 1, i).unwrap();
        }
        g
    }

    #[test]
    fn pipeline_runs_and_validates() {
        let params = small_params();
        let g0 = chain_graph(0.0);
        let g1 = chain_graph(2.0);
        let i0 = crate::geom::rasterize(&g0, 2);
        let i1 = crate::geom::rasterize(&g1, 2);
        let out = inbetween(&g0, &g1, &i0, &i1, &params, &PipelineOptions::default()).unwrap();
        out.fused.validate().unwrap();
        assert!(out.plan.matrix.shape == vec![5, 5]);
        // Deterministic.
        let out2 = inbetween(&g0, &g1, &i0, &i1, &params, &PipelineOptions::default()).unwrap();
        assert_eq!(out.fused, out2.fused);
    }

    #[test]
    fn empty_inputs_yield_empty_output() {
        let params = small_params();
        let empty = LineGraph::new(24, 24);
        let blank = RasterImage::blank(24, 24);
        let g1 = chain_graph(0.0);
        let i1 = crate::geom::rasterize(&g1, 2);
        let out = inbetween(&empty, &g1, &blank, &i1, &params, &PipelineOptions::default()).unwrap();
        assert!(out.matching.pairs.is_empty());
        // Graph-1 vertices survive only if predicted visible; all edges valid.
        out.fused.validate().unwrap();
    }

    #[test]
    fn bad_time_is_rejected() {
        let params = small_params();
        let g = chain_graph(0.0);
        let img = crate::geom::rasterize(&g, 2);
        let options = PipelineOptions {
            t: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            inbetween(&g, &g, &img, &img, &params, &options),
            Err(PipelineError::BadTime(_))
        ));
    }

    #[test]
    fn valid_accuracy_counts_reproduced_pairs() {
        let gt = Matching::from_pairs(vec![(0, 0), (1, 1), (2, 2)], 4, 4);
        let pred = Matching::from_pairs(vec![(0, 0), (1, 2), (3, 3)], 4, 4);
        assert_eq!(valid_accuracy(&pred, &gt), Some(1.0 / 3.0));
        let empty = Matching::from_pairs(vec![], 4, 4);
        assert_eq!(valid_accuracy(&pred, &empty), None);
    }
}
