//! Procedural synthetic dataset: 2-D articulated figures with persistent
//! per-point IDs, hidden-line occlusion, smooth motion scripts, and
//! train/val/test splits with disjoint figures and motions.
//!
//! Every decoration point carries an ID that survives across frames, so
//! ground-truth vertex correspondence falls out of the construction.
//! Occlusion boundaries introduce split vertices with per-frame IDs that
//! never match across frames, which is exactly how occluded vertices are
//! labeled.

use crate::geom::{
    graph_stats, load_graph, merge_close_vertices, rasterize, GraphError, LineGraph, PairStats,
    Point, RasterImage,
};
use crate::learn::FrameData;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Fresh IDs for occlusion split vertices start here; persistent figure IDs
/// stay far below. Each frame gets its own block so split vertices can never
/// match across frames.
const SPLIT_ID_BASE: u64 = 1 << 40;
const SPLIT_ID_FRAME_STRIDE: u64 = 1 << 20;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("graph error: {0}")]
    Graph(#[from] GraphError),
    #[error("manifest error: {0}")]
    Json(#[from] serde_json::Error),
}

/// One bone: its parent, where it attaches along the parent (0 = parent
/// origin, 1 = parent tip), its rest angle relative to the parent direction
/// (radians), and its length in pixels.
#[derive(Debug, Clone)]
pub struct Joint {
    pub parent: Option<usize>,
    pub attach: f64,
    pub rest_angle: f64,
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartShape {
    /// Open chain of decoration points.
    Polyline,
    /// Closed outline whose interior occludes lower-depth parts.
    Polygon,
}

/// A decorated piece attached to a bone. Points are bone-local `(along,
/// offset)` pixel coordinates; each carries a persistent ID.
#[derive(Debug, Clone)]
pub struct Part {
    pub bone: usize,
    pub shape: PartShape,
    pub depth: i32,
    pub local: Vec<Point>,
    pub ids: Vec<u64>,
}

/// A skeleton tree plus decorated parts on a square canvas.
#[derive(Debug, Clone)]
pub struct ArticulatedFigure {
    pub joints: Vec<Joint>,
    pub parts: Vec<Part>,
    pub canvas: u32,
    /// Root position in canvas coordinates before script translation.
    pub root: Point,
}

impl ArticulatedFigure {
    pub fn id_count(&self) -> usize {
        self.parts.iter().map(|p| p.ids.len()).sum()
    }
}

/// Expected bone count for a complexity level: one bone at complexity 1,
/// otherwise torso + head + `2 * min(2*(complexity-1), 8)` limb bones.
pub fn expected_bone_count(complexity: u32) -> usize {
    if complexity <= 1 {
        1
    } else {
        2 + 2 * (2 * (complexity as usize - 1)).min(8)
    }
}

/// Build a seeded articulated figure.
///
/// Complexity 1 is a single decorated bone; higher levels add limb pairs
/// (up to 8 limbs) and more decoration polylines. The bone count is exactly
/// [`expected_bone_count`]; randomness only perturbs proportions, angles,
/// and decoration placement. Deterministic per (seed, complexity, canvas).
pub fn make_figure(seed: u64, complexity: u32, canvas: u32) -> ArticulatedFigure {
    assert!(complexity >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = canvas as f64;
    let mut joints = Vec::new();
    let mut parts = Vec::new();
    let mut next_id = 0u64;
    let take_ids = |n: usize, next_id: &mut u64| -> Vec<u64> {
        let ids = (*next_id..*next_id + n as u64).collect();
        *next_id += n as u64;
        ids
    };

    if complexity == 1 {
        let length = scale * rng.gen_range(0.25..0.35);
        joints.push(Joint {
            parent: None,
            attach: 0.0,
            rest_angle: -std::f64::consts::FRAC_PI_2,
            length,
        });
        let local = vec![
            Point::new(0.0, 0.0),
            Point::new(length * 0.5, rng.gen_range(-3.0..3.0)),
            Point::new(length, 0.0),
        ];
        let n = local.len();
        parts.push(Part {
            bone: 0,
            shape: PartShape::Polyline,
            depth: 0,
            local,
            ids: take_ids(n, &mut next_id),
        });
        return ArticulatedFigure {
            joints,
            parts,
            canvas,
            root: Point::new(scale * 0.5, scale * 0.62),
        };
    }

    // Torso points straight up from the root; the head continues it.
    let torso_len = scale * rng.gen_range(0.18..0.23);
    let torso = 0usize;
    joints.push(Joint {
        parent: None,
        attach: 0.0,
        rest_angle: -std::f64::consts::FRAC_PI_2,
        length: torso_len,
    });
    let head_len = scale * rng.gen_range(0.05..0.08);
    let head = joints.len();
    joints.push(Joint {
        parent: Some(torso),
        attach: 1.0,
        rest_angle: rng.gen_range(-0.1..0.1),
        length: head_len,
    });

    // Torso body polygon, depth 0.
    {
        let w0 = scale * rng.gen_range(0.04..0.06);
        let w1 = scale * rng.gen_range(0.05..0.075);
        let local = vec![
            Point::new(0.0, -w0),
            Point::new(torso_len * 0.45, -w1),
            Point::new(torso_len * 0.95, -w1 * 0.75),
            Point::new(torso_len, 0.0),
            Point::new(torso_len * 0.95, w1 * 0.75),
            Point::new(torso_len * 0.45, w1),
            Point::new(0.0, w0),
        ];
        let n = local.len();
        parts.push(Part {
            bone: torso,
            shape: PartShape::Polygon,
            depth: 0,
            local,
            ids: take_ids(n, &mut next_id),
        });
    }
    // Head outline, in front of the torso. Kept clear of the torso tip so
    // the rest pose has no occlusion at all; only motion creates it.
    {
        let r = head_len * rng.gen_range(0.7..0.92);
        let cx = head_len * 1.15;
        let sides = 8;
        let local: Vec<Point> = (0..sides)
            .map(|i| {
                let a = i as f64 / sides as f64 * std::f64::consts::TAU;
                Point::new(cx + r * a.cos(), r * a.sin())
            })
            .collect();
        parts.push(Part {
            bone: head,
            shape: PartShape::Polygon,
            depth: 2,
            local,
            ids: take_ids(sides, &mut next_id),
        });
    }

    // Limbs: alternating arms (torso tip, drawn in front) and legs (root,
    // drawn behind everything), two bones each. The first arm and leg of
    // each side carry a small polygon at the tip (mitt / boot) that sweeps
    // across other parts during motion and produces occlusion events; extra
    // limbs of the same side get disjoint rest-angle bands so the rest pose
    // stays occlusion-free.
    let limb_count = (2 * (complexity as usize - 1)).min(8);
    for limb in 0..limb_count {
        let is_arm = limb % 2 == 0;
        let side = if (limb / 2) % 2 == 0 { 1.0 } else { -1.0 };
        let rank = limb / 4; // 0 for the first limb pair of this side
        let (attach, seg_len, depth) = if is_arm {
            (rng.gen_range(0.85..1.0), scale * rng.gen_range(0.09..0.13), 3)
        } else {
            (0.0, scale * rng.gen_range(0.11..0.15), -2)
        };
        // Legs hang downward: rotate from the torso's up direction back past
        // vertical; arms spread sideways.
        let first_angle = if is_arm {
            side * (1.35 + 0.45 * rank as f64 + rng.gen_range(0.0..0.35))
        } else {
            side * (2.55 + 0.4 * rank as f64 + rng.gen_range(0.0..0.3))
        };
        let upper = joints.len();
        joints.push(Joint {
            parent: Some(torso),
            attach,
            rest_angle: first_angle,
            length: seg_len,
        });
        let lower = joints.len();
        joints.push(Joint {
            parent: Some(upper),
            attach: 1.0,
            rest_angle: side * rng.gen_range(0.1..0.5),
            length: seg_len * rng.gen_range(0.85..1.1),
        });
        for &bone in &[upper, lower] {
            let len = joints[bone].length;
            let bend = rng.gen_range(-2.0..2.0);
            let local = vec![
                Point::new(0.0, 0.0),
                Point::new(len * 0.5, bend),
                Point::new(len, 0.0),
            ];
            let n = local.len();
            parts.push(Part {
                bone,
                shape: PartShape::Polyline,
                depth,
                local,
                ids: take_ids(n, &mut next_id),
            });
        }
        if complexity >= 3 && rank == 0 {
            let r = scale * rng.gen_range(0.05..0.068);
            let tip = joints[lower].length;
            let sides = 6;
            let local: Vec<Point> = (0..sides)
                .map(|i| {
                    let a = i as f64 / sides as f64 * std::f64::consts::TAU;
                    Point::new(tip + r * a.cos(), r * a.sin())
                })
                .collect();
            parts.push(Part {
                bone: lower,
                shape: PartShape::Polygon,
                depth: if is_arm { 4 } else { -1 },
                local,
                ids: take_ids(sides, &mut next_id),
            });
        }
    }

    // Torso stripes, between the body (0) and the head/arms.
    let stripe_count = complexity as usize;
    for _ in 0..stripe_count {
        let along = rng.gen_range(0.15..0.85) * torso_len;
        let half = scale * rng.gen_range(0.02..0.05);
        let tilt = rng.gen_range(-2.0..2.0);
        let local = vec![
            Point::new(along - tilt, -half),
            Point::new(along, rng.gen_range(-1.0..1.0)),
            Point::new(along + tilt, half),
        ];
        let n = local.len();
        parts.push(Part {
            bone: torso,
            shape: PartShape::Polyline,
            depth: 1,
            local,
            ids: take_ids(n, &mut next_id),
        });
    }

    ArticulatedFigure {
        joints,
        parts,
        canvas,
        root: Point::new(scale * 0.5, scale * 0.62),
    }
}

/// Per-joint angle offsets over the frames plus a root translation path.
#[derive(Debug, Clone)]
pub struct MotionScript {
    /// `angles[joint][frame]`, radians added to the rest angle.
    pub angles: Vec<Vec<f64>>,
    /// Root translation per frame, pixels.
    pub root: Vec<Point>,
}

impl MotionScript {
    pub fn frame_count(&self) -> usize {
        self.root.len()
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// A seeded motion: every joint eases from its rest pose toward a target
/// offset (monotone in time) while the root translates linearly. Amplitude
/// 1.0 gives moderate swings; joints deeper in the tree move more, and limb
/// targets drift toward the body so occluding configurations accumulate
/// over the sequence instead of only being swept through.
pub fn make_motion(
    seed: u64,
    figure: &ArticulatedFigure,
    frames: usize,
    amplitude: f64,
) -> MotionScript {
    assert!(frames >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth_of = |mut j: usize| {
        let mut d = 0;
        while let Some(p) = figure.joints[j].parent {
            d += 1;
            j = p;
        }
        d
    };
    // Sign of the limb's side: the rest angle of its depth-1 ancestor.
    let side_of = |mut j: usize| {
        let mut prev = j;
        while let Some(p) = figure.joints[j].parent {
            prev = j;
            j = p;
        }
        if prev == j {
            0.0
        } else {
            figure.joints[prev].rest_angle.signum()
        }
    };
    let canvas = figure.canvas as f64;
    let targets: Vec<f64> = (0..figure.joints.len())
        .map(|j| {
            let depth = depth_of(j);
            let scale = match depth {
                0 => 0.1,
                1 => 0.8,
                _ => 1.2,
            };
            let side = if depth == 0 { 0.0 } else { side_of(j) };
            let raw = if side == 0.0 {
                rng.gen_range(-0.55..0.55)
            } else {
                rng.gen_range(-0.55..0.55) * 0.5 - side * rng.gen_range(0.05..0.5)
            };
            raw * amplitude * scale
        })
        .collect();
    let translation = Point::new(
        rng.gen_range(-0.18..0.18) * canvas * amplitude,
        rng.gen_range(-0.10..0.10) * canvas * amplitude,
    );
    let mut angles = vec![Vec::with_capacity(frames); figure.joints.len()];
    let mut root = Vec::with_capacity(frames);
    for k in 0..frames {
        let tau = if frames == 1 {
            0.0
        } else {
            k as f64 / (frames - 1) as f64
        };
        let ease = smoothstep(tau);
        for (j, target) in targets.iter().enumerate() {
            angles[j].push(target * ease);
        }
        root.push(translation * tau);
    }
    MotionScript { angles, root }
}

/// World-space pose of every joint at one frame: (origin, angle).
fn joint_poses(figure: &ArticulatedFigure, script: &MotionScript, frame: usize) -> Vec<(Point, f64)> {
    let mut poses: Vec<(Point, f64)> = Vec::with_capacity(figure.joints.len());
    let root_pos = figure.root + script.root[frame];
    for (j, joint) in figure.joints.iter().enumerate() {
        let delta = script.angles[j][frame];
        match joint.parent {
            None => {
                poses.push((root_pos, joint.rest_angle + delta));
            }
            Some(p) => {
                let (porigin, pangle) = poses[p];
                let pdir = Point::new(pangle.cos(), pangle.sin());
                let origin = porigin + pdir * (figure.joints[p].length * joint.attach);
                poses.push((origin, pangle + joint.rest_angle + delta));
            }
        }
    }
    poses
}

/// A posed part: world points with their persistent IDs.
struct PosedPart {
    bone: usize,
    shape: PartShape,
    depth: i32,
    points: Vec<Point>,
    ids: Vec<u64>,
}

fn pose_parts(figure: &ArticulatedFigure, script: &MotionScript, frame: usize) -> Vec<PosedPart> {
    let poses = joint_poses(figure, script, frame);
    figure
        .parts
        .iter()
        .map(|part| {
            let (origin, angle) = poses[part.bone];
            let dir = Point::new(angle.cos(), angle.sin());
            let normal = Point::new(-angle.sin(), angle.cos());
            let points = part
                .local
                .iter()
                .map(|&lp| origin + dir * lp.x + normal * lp.y)
                .collect();
            PosedPart {
                bone: part.bone,
                shape: part.shape,
                depth: part.depth,
                points,
                ids: part.ids.clone(),
            }
        })
        .collect()
}

/// Even-odd test, strict interior. Points on the boundary count as outside.
fn strictly_inside(p: Point, poly: &[Point]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        // Distance to the segment ~ 0 means boundary, not interior.
        if point_on_segment(p, a, b) {
            return false;
        }
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

fn point_on_segment(p: Point, a: Point, b: Point) -> bool {
    let ab = b - a;
    let len2 = ab.x * ab.x + ab.y * ab.y;
    if len2 == 0.0 {
        return p.dist(&a) < 1e-9;
    }
    let t = ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2;
    if !(0.0..=1.0).contains(&t) {
        return false;
    }
    let proj = a + ab * t;
    p.dist(&proj) < 1e-9
}

/// Intersection parameters (on `a..b`) with a polygon's edges, in (0, 1).
fn segment_polygon_crossings(a: Point, b: Point, poly: &[Point]) -> Vec<f64> {
    let mut ts = Vec::new();
    let d = b - a;
    let n = poly.len();
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        let e = q - p;
        let denom = d.x * e.y - d.y * e.x;
        if denom.abs() < 1e-12 {
            continue;
        }
        let ap = p - a;
        let t = (ap.x * e.y - ap.y * e.x) / denom;
        let s = (ap.x * d.y - ap.y * d.x) / denom;
        if t > 1e-9 && t < 1.0 - 1e-9 && s >= -1e-9 && s <= 1.0 + 1e-9 {
            ts.push(t);
        }
    }
    ts
}

/// Visible sub-intervals of a segment after removing every occluder's strict
/// interior and everything outside the canvas rectangle.
fn visible_intervals(
    a: Point,
    b: Point,
    occluders: &[&PosedPart],
    canvas: f64,
) -> Vec<(f64, f64)> {
    let mut cuts = vec![0.0, 1.0];
    for occ in occluders {
        cuts.extend(segment_polygon_crossings(a, b, &occ.points));
    }
    // Canvas border crossings.
    for &(axis_x, bound) in &[(true, 0.0), (true, canvas - 1.0), (false, 0.0), (false, canvas - 1.0)] {
        let (pa, pb) = if axis_x { (a.x, b.x) } else { (a.y, b.y) };
        let d = pb - pa;
        if d.abs() > 1e-12 {
            let t = (bound - pa) / d;
            if t > 1e-9 && t < 1.0 - 1e-9 {
                cuts.push(t);
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|x, y| (*x - *y).abs() < 1e-9);
    let mut out: Vec<(f64, f64)> = Vec::new();
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi - lo < 1e-9 {
            continue;
        }
        let mid = a + (b - a) * ((lo + hi) * 0.5);
        let in_canvas = mid.x >= 0.0 && mid.x <= canvas - 1.0 && mid.y >= 0.0 && mid.y <= canvas - 1.0;
        let hidden = !in_canvas
            || occluders
                .iter()
                .any(|occ| strictly_inside(mid, &occ.points));
        if hidden {
            continue;
        }
        match out.last_mut() {
            Some(last) if (last.1 - lo).abs() < 1e-9 => last.1 = hi,
            _ => out.push((lo, hi)),
        }
    }
    out
}

fn clamp_to_canvas(p: Point, canvas: f64) -> Point {
    Point::new(p.x.clamp(0.0, canvas - 1.0), p.y.clamp(0.0, canvas - 1.0))
}

/// Pose one frame into a labeled line graph.
///
/// Forward kinematics places every part; portions strictly inside a
/// higher-depth polygon (or outside the canvas) are removed, with the cut
/// points becoming fresh-ID vertices that never match across frames.
/// Endpoints within 0.5 px are merged.
pub fn pose_frame(figure: &ArticulatedFigure, script: &MotionScript, frame: usize) -> LineGraph {
    assert!(frame < script.frame_count());
    let posed = pose_parts(figure, script, frame);
    let canvas = figure.canvas as f64;
    let mut graph = LineGraph::new(figure.canvas, figure.canvas);
    let mut ref_ids: Vec<u64> = Vec::new();
    let mut split_id = SPLIT_ID_BASE + frame as u64 * SPLIT_ID_FRAME_STRIDE;

    for (pi, part) in posed.iter().enumerate() {
        // Parts on the same bone never occlude each other (a tip polygon
        // would otherwise clip its own limb line even at rest).
        let occluders: Vec<&PosedPart> = posed
            .iter()
            .enumerate()
            .filter(|&(oi, o)| {
                oi != pi
                    && o.shape == PartShape::Polygon
                    && o.depth > part.depth
                    && o.bone != part.bone
            })
            .map(|(_, o)| o)
            .collect();
        let n = part.points.len();
        if n < 2 {
            continue;
        }
        let segment_count = match part.shape {
            PartShape::Polyline => n - 1,
            PartShape::Polygon => n,
        };
        // Per-source-point vertex cache for this part in this frame.
        let mut source_vertex: Vec<Option<usize>> = vec![None; n];
        for s in 0..segment_count {
            let ia = s;
            let ib = (s + 1) % n;
            let a = part.points[ia];
            let b = part.points[ib];
            for (lo, hi) in visible_intervals(a, b, &occluders, canvas) {
                let delta = b - a;
                let mut vertex_for = |t: f64,
                                      source: Option<usize>,
                                      graph: &mut LineGraph,
                                      ref_ids: &mut Vec<u64>|
                 -> usize {
                    if let Some(si) = source {
                        if let Some(v) = source_vertex[si] {
                            return v;
                        }
                    }
                    let p = clamp_to_canvas(a + delta * t, canvas);
                    let v = graph.vertices.len();
                    graph.vertices.push(p);
                    match source {
                        Some(si) => {
                            ref_ids.push(part.ids[si]);
                            source_vertex[si] = Some(v);
                        }
                        None => {
                            ref_ids.push(split_id);
                            split_id += 1;
                        }
                    }
                    v
                };
                let va = vertex_for(
                    lo,
                    if lo == 0.0 { Some(ia) } else { None },
                    &mut graph,
                    &mut ref_ids,
                );
                let vb = vertex_for(
                    hi,
                    if hi == 1.0 { Some(ib) } else { None },
                    &mut graph,
                    &mut ref_ids,
                );
                if va != vb {
                    graph.edges.insert((va.min(vb), va.max(vb)));
                }
            }
        }
    }
    graph.ref_ids = Some(ref_ids);
    merge_close_vertices(&graph, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameEntry {
    pub graph: String,
    pub image: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub id: String,
    pub figure: usize,
    pub motion: usize,
    pub split: Split,
    pub frames: Vec<FrameEntry>,
}

/// Generator settings recorded in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub figures: usize,
    pub motions: usize,
    pub frames: usize,
    pub canvas: u32,
    pub seed: u64,
    pub complexity: u32,
    pub amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            figures: 6,
            motions: 6,
            frames: 16,
            canvas: 128,
            seed: 7,
            complexity: 3,
            amplitude: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SynthConfig,
    pub sequences: Vec<SequenceEntry>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn sequences_of(&self, split: Split) -> impl Iterator<Item = &SequenceEntry> {
        self.sequences.iter().filter(move |s| s.split == split)
    }
}

fn mix_seed(base: u64, salt: u64, index: u64) -> u64 {
    // splitmix64 over the combined value.
    let mut z = base
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(salt)
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Generate the full dataset on disk: one directory per sequence with graph
/// JSON + PNG per frame, and a manifest with exclusive splits.
///
/// Figures and motions are split ~2:1 into train/test pools; a sequence is
/// train when both its figure and motion are train, test when both are
/// test, and val otherwise. Deterministic per seed, including the manifest
/// bytes.
pub fn generate_dataset(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest, SynthError> {
    assert!(config.figures >= 1 && config.motions >= 1 && config.frames >= 1);
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let figures: Vec<ArticulatedFigure> = (0..config.figures)
        .map(|i| {
            make_figure(
                mix_seed(config.seed, 0xf16, i as u64),
                config.complexity,
                config.canvas,
            )
        })
        .collect();
    let motions: Vec<MotionScript> = (0..config.motions)
        .map(|j| {
            make_motion(
                mix_seed(config.seed, 0x307, j as u64),
                &figures[0],
                config.frames,
                config.amplitude,
            )
        })
        .collect();
    let train_figures = ((config.figures * 2) + 2) / 3;
    let train_motions = ((config.motions * 2) + 2) / 3;
    let mut sequences = Vec::new();
    for (fi, figure) in figures.iter().enumerate() {
        for (mi, motion) in motions.iter().enumerate() {
            let split = match (fi < train_figures, mi < train_motions) {
                (true, true) => Split::Train,
                (false, false) => Split::Test,
                _ => Split::Val,
            };
            let id = format!("seq_{fi:02}_{mi:02}");
            let dir = out_dir.join(&id);
            std::fs::create_dir_all(&dir)?;
            let mut frames = Vec::new();
            for k in 0..config.frames {
                let graph = pose_frame(figure, motion, k);
                let image = rasterize(&graph, 2);
                let graph_rel = format!("{id}/frame_{k:03}.json");
                let image_rel = format!("{id}/frame_{k:03}.png");
                crate::geom::save_graph(&graph, out_dir.join(&graph_rel))?;
                image.save(out_dir.join(&image_rel))?;
                frames.push(FrameEntry {
                    graph: graph_rel,
                    image: image_rel,
                });
            }
            sequences.push(SequenceEntry {
                id,
                figure: fi,
                motion: mi,
                split,
                frames,
            });
        }
    }
    let manifest = DatasetManifest {
        config: config.clone(),
        sequences,
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Load every frame of a sequence (graphs + rasters).
pub fn load_sequence_frames(
    root: impl AsRef<Path>,
    entry: &SequenceEntry,
) -> Result<Vec<FrameData>, SynthError> {
    let root = root.as_ref();
    entry
        .frames
        .iter()
        .map(|f| {
            Ok(FrameData {
                graph: load_graph(root.join(&f.graph))?,
                image: RasterImage::load(root.join(&f.image))?,
            })
        })
        .collect()
}

/// Build supervised training pairs from one split: every (z, z+gap+1) pair
/// for every odd gap in `gap_min..=gap_max`, skipping pairs without any
/// ground-truth match.
pub fn build_split_samples(
    manifest: &DatasetManifest,
    root: impl AsRef<Path>,
    split: Split,
    gap_min: usize,
    gap_max: usize,
    spectral_dim: usize,
) -> Result<Vec<crate::learn::TrainSample>, SynthError> {
    let root = root.as_ref();
    let mut samples = Vec::new();
    for entry in manifest.sequences_of(split) {
        let frames = load_sequence_frames(root, entry)?;
        for gap in gap_min..=gap_max {
            if gap % 2 == 0 {
                continue;
            }
            let stride = gap + 1;
            for start in 0..frames.len().saturating_sub(stride) {
                let end = start + stride;
                if frames[start].graph.vertex_count() == 0 || frames[end].graph.vertex_count() == 0
                {
                    continue;
                }
                let sample = crate::learn::build_sample(&frames, start, end, spectral_dim)?;
                if sample.gt.pairs.is_empty() {
                    continue;
                }
                samples.push(sample);
            }
        }
    }
    Ok(samples)
}

/// Per-gap average of the pair difficulty statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapStats {
    pub gap: usize,
    pub pairs: usize,
    pub occlusion_rate: f64,
    pub avg_shift: f64,
    pub avg_max_shift: f64,
}

/// Average occlusion rate, vertex shift, and per-pair max shift over all
/// frame pairs `(z, z+gap+1)` of every sequence, per gap. The shift averages
/// skip pairs without any match (their per-pair shifts are degenerate).
pub fn dataset_stats(
    manifest: &DatasetManifest,
    root: impl AsRef<Path>,
    gaps: &[usize],
) -> Result<Vec<GapStats>, SynthError> {
    let root = root.as_ref();
    let all_frames: Vec<Vec<LineGraph>> = manifest
        .sequences
        .iter()
        .map(|entry| {
            entry
                .frames
                .iter()
                .map(|f| load_graph(root.join(&f.graph)))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::new();
    for &gap in gaps {
        let stride = gap + 1;
        let mut occ_sum = 0.0;
        let mut shift_sum = 0.0;
        let mut max_sum = 0.0;
        let mut pairs = 0usize;
        let mut matched_pairs = 0usize;
        for frames in &all_frames {
            for start in 0..frames.len().saturating_sub(stride) {
                let stats: PairStats = graph_stats(&frames[start], &frames[start + stride])?;
                occ_sum += stats.occlusion_rate;
                pairs += 1;
                if stats.matched_pairs > 0 {
                    shift_sum += stats.avg_shift;
                    max_sum += stats.max_shift;
                    matched_pairs += 1;
                }
            }
        }
        out.push(GapStats {
            gap,
            pairs,
            occlusion_rate: if pairs == 0 { 0.0 } else { occ_sum / pairs as f64 },
            avg_shift: if matched_pairs == 0 {
                0.0
            } else {
                shift_sum / matched_pairs as f64
            },
            avg_max_shift: if matched_pairs == 0 {
                0.0
            } else {
                max_sum / matched_pairs as f64
            },
        });
    }
    Ok(out)
}
