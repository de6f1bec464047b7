//! Chamfer-distance metric and the dataset evaluation harness.

use crate::geom::{rasterize, Mask, RasterImage};
use crate::model::ModelParams;
use crate::pipeline::{inbetween, PipelineOptions};
use crate::synth::{load_sequence_frames, DatasetManifest, Split, SynthError};
use crate::tensor::Tensor;
use crate::vectorize::binarize;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Sentinel distance used when a mask has no foreground pixels at all.
pub const EMPTY_MASK_SENTINEL: f64 = f64::MAX;

/// Exact squared Euclidean distance transform (two-pass algorithm:
/// per-column 1-D transform, then per-row lower-envelope-of-parabolas
/// pass). An all-empty mask yields the sentinel everywhere.
pub fn distance_transform_squared(mask: &Mask) -> Tensor {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let mut out = Tensor::zeros(&[h, w]);
    if mask.count() == 0 {
        for v in out.data.iter_mut() {
            *v = EMPTY_MASK_SENTINEL;
        }
        return out;
    }
    const INF: f64 = 1e18;
    // Pass 1: 1-D squared distance along each column.
    let mut col_dist = vec![INF; w * h];
    for x in 0..w {
        let mut f: Vec<f64> = (0..h)
            .map(|y| if mask.at(x as u32, y as u32) { 0.0 } else { INF })
            .collect();
        dt_1d(&mut f);
        for (y, &v) in f.iter().enumerate() {
            col_dist[y * w + x] = v;
        }
    }
    // Pass 2: 1-D transform along each row over the column results.
    for y in 0..h {
        let mut f: Vec<f64> = col_dist[y * w..(y + 1) * w].to_vec();
        dt_1d(&mut f);
        out.data[y * w..(y + 1) * w].copy_from_slice(&f);
    }
    out
}

/// Lower envelope of parabolas `f[q] + (x - q)^2`, in place.
fn dt_1d(f: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut v = vec![0usize; n]; // parabola apexes
    let mut z = vec![0.0f64; n + 1]; // envelope breakpoints
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] && k == 0 {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            k = 0;
            continue;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    let orig = f.to_vec();
    for (x, slot) in f.iter_mut().enumerate() {
        while z[k + 1] < x as f64 {
            k += 1;
        }
        let p = v[k];
        let d = x as f64 - p as f64;
        *slot = orig[p] + d * d;
    }
}

/// Exact Euclidean distance from every pixel to the nearest true pixel.
pub fn distance_transform(mask: &Mask) -> Tensor {
    let mut sq = distance_transform_squared(mask);
    if mask.count() == 0 {
        return sq; // sentinel values stay as-is
    }
    for v in sq.data.iter_mut() {
        *v = v.sqrt();
    }
    sq
}

/// A chamfer score; `degenerate` flags comparisons where one side had no
/// line pixels (the sentinel distances make the value meaningless).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChamferScore {
    pub value: f64,
    pub degenerate: bool,
}

/// Chamfer distance between two line images.
///
/// Both images are binarized with the 0.99-of-max rule; the score is
/// `(Σ pred·DT(gt) + Σ gt·DT(pred)) / (H · W · d)` where the sums run over
/// line pixels. Exactly symmetric in its arguments.
pub fn chamfer(pred: &RasterImage, gt: &RasterImage, d: f64) -> ChamferScore {
    assert_eq!(pred.width, gt.width, "image widths differ");
    assert_eq!(pred.height, gt.height, "image heights differ");
    assert!(d > 0.0);
    let pred_mask = binarize(pred);
    let gt_mask = binarize(gt);
    let degenerate = pred_mask.count() == 0 || gt_mask.count() == 0;
    let dt_gt = distance_transform(&gt_mask);
    let dt_pred = distance_transform(&pred_mask);
    // The two directional sums are accumulated separately so that swapping
    // the arguments swaps the terms of one final commutative addition,
    // keeping the score exactly symmetric.
    let mut forward = 0.0f64;
    for (i, &on) in pred_mask.data.iter().enumerate() {
        if on {
            forward += dt_gt.data[i];
        }
    }
    let mut backward = 0.0f64;
    for (i, &on) in gt_mask.data.iter().enumerate() {
        if on {
            backward += dt_pred.data[i];
        }
    }
    let value = (forward + backward) / (pred.height as f64 * pred.width as f64 * d);
    ChamferScore { value, degenerate }
}

/// One evaluated frame pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairCd {
    pub gap: usize,
    pub sequence: String,
    pub start: usize,
    pub cd: f64,
    pub degenerate: bool,
    /// Chamfer distance of the copy-first-frame baseline on the same pair.
    pub baseline_cd: f64,
    /// Average ground-truth vertex shift of the pair (when labels exist).
    pub avg_shift: Option<f64>,
}

/// Evaluation report: per-pair scores plus per-gap means. Mean CDs are also
/// reported scaled by 1e5 (the conventional unit for these scores).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CdReport {
    pub gaps: Vec<usize>,
    pub t: f64,
    pub d: f64,
    pub split: Split,
    pub pairs: Vec<PairCd>,
}

impl CdReport {
    pub fn mean_cd(&self, gap: usize) -> Option<f64> {
        let scores: Vec<f64> = self
            .pairs
            .iter()
            .filter(|p| p.gap == gap && !p.degenerate)
            .map(|p| p.cd)
            .collect();
        if scores.is_empty() {
            None
        } else {
            Some(scores.iter().sum::<f64>() / scores.len() as f64)
        }
    }

    /// CSV rows `gap,pair_id,cd` with one `summary` row per gap (CD also
    /// given in 1e-5 units).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gap,pair_id,cd\n");
        for p in &self.pairs {
            out.push_str(&format!("{},{}:{},{}\n", p.gap, p.sequence, p.start, p.cd));
        }
        for &gap in &self.gaps {
            if let Some(mean) = self.mean_cd(gap) {
                out.push_str(&format!(
                    "{},summary,{} # x1e-5: {:.4}\n",
                    gap,
                    mean,
                    mean * 1e5
                ));
            }
        }
        out
    }
}

/// Default search diameter: a tenth of the larger image side.
pub fn default_search_diameter(width: u32, height: u32) -> f64 {
    width.max(height) as f64 / 10.0
}

/// Evaluate the model over a dataset split.
///
/// For each gap `g`, every pair `(z, z+g+1)` runs through the pipeline at
/// time `t`; the fused graph is rasterized with line width 2 and scored
/// against the stored center-frame raster. Gaps must be odd so the center
/// frame exists.
pub fn evaluate(
    params: &ModelParams,
    manifest: &DatasetManifest,
    root: impl AsRef<Path>,
    gaps: &[usize],
    t: f64,
    d: Option<f64>,
    split: Split,
) -> Result<CdReport, SynthError> {
    let root = root.as_ref();
    let canvas = manifest.config.canvas;
    let d = d.unwrap_or_else(|| default_search_diameter(canvas, canvas));
    let options = PipelineOptions {
        t,
        ..Default::default()
    };
    let mut pairs = Vec::new();
    for entry in manifest.sequences_of(split) {
        let frames = load_sequence_frames(root, entry)?;
        for &gap in gaps {
            assert_eq!(gap % 2, 1, "evaluation gaps must be odd");
            let stride = gap + 1;
            for start in 0..frames.len().saturating_sub(stride) {
                let end = start + stride;
                let center = start + stride / 2;
                let out = inbetween(
                    &frames[start].graph,
                    &frames[end].graph,
                    &frames[start].image,
                    &frames[end].image,
                    params,
                    &options,
                )
                .expect("dataset frames satisfy pipeline preconditions");
                let rendered = rasterize(&out.fused, 2);
                let score = chamfer(&rendered, &frames[center].image, d);
                let baseline = chamfer(&frames[start].image, &frames[center].image, d);
                let avg_shift = crate::geom::graph_stats(&frames[start].graph, &frames[end].graph)
                    .ok()
                    .filter(|s| s.matched_pairs > 0)
                    .map(|s| s.avg_shift);
                pairs.push(PairCd {
                    gap,
                    sequence: entry.id.clone(),
                    start,
                    cd: score.value,
                    degenerate: score.degenerate,
                    baseline_cd: baseline.value,
                    avg_shift,
                });
            }
        }
    }
    Ok(CdReport {
        gaps: gaps.to_vec(),
        t,
        d,
        split,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{LineGraph, Point};
    use rand::prelude::*;

    fn mask_of(width: u32, height: u32, pixels: &[(u32, u32)]) -> Mask {
        let mut m = Mask::new(width, height);
        for &(x, y) in pixels {
            m.set(x, y, true);
        }
        m
    }

    #[test]
    fn distance_from_single_pixel_is_euclidean() {
        let m = mask_of(8, 8, &[(0, 0)]);
        let dt = distance_transform(&m);
        assert_eq!(dt.at2(4, 3), 5.0); // row 4 (y), col 3 (x): 3-4-5
        assert_eq!(dt.at2(0, 0), 0.0);
    }

    #[test]
    fn all_true_mask_is_all_zero() {
        let mut m = Mask::new(5, 4);
        for v in m.data.iter_mut() {
            *v = true;
        }
        let dt = distance_transform(&m);
        assert!(dt.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_mask_gives_sentinel() {
        let dt = distance_transform(&Mask::new(4, 4));
        assert!(dt.data.iter().all(|&v| v == EMPTY_MASK_SENTINEL));
    }

    #[test]
    fn squared_transform_equals_brute_force_on_random_masks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..60 {
            let (w, h) = (16u32, 16u32);
            let mut m = Mask::new(w, h);
            let fill = rng.gen_range(1..30);
            for _ in 0..fill {
                m.set(rng.gen_range(0..w), rng.gen_range(0..h), true);
            }
            let dt = distance_transform_squared(&m);
            for y in 0..h {
                for x in 0..w {
                    let mut best = f64::INFINITY;
                    for yy in 0..h {
                        for xx in 0..w {
                            if m.at(xx, yy) {
                                let dx = xx as f64 - x as f64;
                                let dy = yy as f64 - y as f64;
                                best = best.min(dx * dx + dy * dy);
                                }
                        }
                    }
                    assert_eq!(dt.at2(y as usize, x as usize), best, "({x},{y})");
                }
            }
        }
    }

    fn image_with_pixels(width: u32, height: u32, pixels: &[(u32, u32)]) -> RasterImage {
        let mut img = RasterImage::blank(width, height);
        for &(x, y) in pixels {
            img.set(x, y, 0.0);
        }
        img
    }

    #[test]
    fn chamfer_identical_images_is_zero() {
        let img = image_with_pixels(16, 16, &[(3, 4), (5, 6), (9, 2)]);
        let s = chamfer(&img, &img, 8.0);
        assert_eq!(s.value, 0.0);
        assert!(!s.degenerate);
    }

    #[test]
    fn chamfer_single_pixel_pair_matches_closed_form() {
        for k in 1..6u32 {
            let a = image_with_pixels(32, 32, &[(0, 0)]);
            let b = image_with_pixels(32, 32, &[(k, 0)]);
            let s = chamfer(&a, &b, 16.0);
            let expect = 2.0 * k as f64 / (32.0 * 32.0 * 16.0);
            assert_eq!(s.value, expect, "k={k}");
        }
    }

    #[test]
    fn chamfer_is_exactly_symmetric() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut a = RasterImage::blank(24, 24);
            let mut b = RasterImage::blank(24, 24);
            for _ in 0..rng.gen_range(1..40) {
                a.set(rng.gen_range(0..24), rng.gen_range(0..24), 0.0);
            }
            for _ in 0..rng.gen_range(1..40) {
                b.set(rng.gen_range(0..24), rng.gen_range(0..24), 0.0);
            }
            let ab = chamfer(&a, &b, 2.4);
            let ba = chamfer(&b, &a, 2.4);
            assert_eq!(ab.value, ba.value);
        }
    }

    #[test]
    fn chamfer_grows_with_translation() {
        let mut base = LineGraph::new(64, 64);
        base.vertices.push(Point::new(5.0, 30.0));
        base.vertices.push(Point::new(25.0, 30.0));
        base.add_edge(0, 1).unwrap();
        let img0 = rasterize(&base, 2);
        let mut last = 0.0;
        for k in (0..=24).step_by(4) {
            let shifted = base.translated(k as f64, 0.0);
            let img = rasterize(&shifted, 2);
            let s = chamfer(&img, &img0, 6.4);
            assert!(
                s.value >= last,
                "k={k}: {} < {last}",
                s.value
            );
            last = s.value;
        }
    }

    #[test]
    fn chamfer_empty_side_is_flagged() {
        let blank = RasterImage::blank(8, 8);
        let img = image_with_pixels(8, 8, &[(2, 2)]);
        let s = chamfer(&blank, &img, 4.0);
        assert!(s.degenerate);
        let both = chamfer(&blank, &blank, 4.0);
        assert!(both.degenerate);
        assert_eq!(both.value, 0.0);
    }

    #[test]
    fn report_means_equal_recomputation() {
        let pairs = vec![
            PairCd {
                gap: 1,
                sequence: "s".into(),
                start: 0,
                cd: 2.0,
                degenerate: false,
                baseline_cd: 3.0,
                avg_shift: None,
            },
            PairCd {
                gap: 1,
                sequence: "s".into(),
                start: 1,
                cd: 4.0,
                degenerate: false,
                baseline_cd: 3.0,
                avg_shift: None,
            },
            PairCd {
                gap: 1,
                sequence: "s".into(),
                start: 2,
                cd: 100.0,
                degenerate: true,
                baseline_cd: 3.0,
                avg_shift: None,
            },
        ];
        let report = CdReport {
            gaps: vec![1],
            t: 0.5,
            d: 6.4,
            split: Split::Test,
            pairs,
        };
        assert_eq!(report.mean_cd(1), Some(3.0));
        assert!(report.to_csv().contains("summary"));
    }
}
