//! Raster-to-graph conversion: thresholding, thinning, arc tracing, and
//! polyline simplification.

use crate::geom::{merge_close_vertices, LineGraph, Mask, Point, RasterImage};
use std::collections::BTreeMap;

/// An open chain of pixel-space points (at least two, consecutive distinct).
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    pub points: Vec<Point>,
}

impl Polyline {
    pub fn is_closed(&self) -> bool {
        self.points.len() > 2 && self.points.first() == self.points.last()
    }
}

/// Threshold an image into a line mask: a pixel is line when its intensity
/// is strictly below 0.99 times the image maximum. An all-equal image
/// (including all-white and all-black) yields an empty mask.
pub fn binarize(image: &RasterImage) -> Mask {
    let max = image.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut mask = Mask::new(image.width, image.height);
    if !max.is_finite() {
        return mask;
    }
    let threshold = 0.99 * max;
    for (m, &v) in mask.data.iter_mut().zip(&image.data) {
        *m = v < threshold;
    }
    mask
}

/// Iterative Zhang-Suen thinning to a 1-pixel-wide 8-connected skeleton.
pub fn skeletonize(mask: &Mask) -> Mask {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let mut cur = mask.clone();
    let at = |m: &Mask, x: i64, y: i64| -> bool {
        x >= 0 && y >= 0 && x < w && y < h && m.at(x as u32, y as u32)
    };
    // p2..p9 clockwise from north.
    let ring = [
        (0, -1),
        (1, -1),
        (1, 0),
        (1, 1),
        (0, 1),
        (-1, 1),
        (-1, 0),
        (-1, -1),
    ];
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut to_clear = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if !cur.at(x as u32, y as u32) {
                        continue;
                    }
                    let p: Vec<bool> = ring.iter().map(|&(dx, dy)| at(&cur, x + dx, y + dy)).collect();
                    let b: usize = p.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let mut a = 0;
                    for i in 0..8 {
                        if !p[i] && p[(i + 1) % 8] {
                            a += 1;
                        }
                    }
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if ok {
                        to_clear.push((x as u32, y as u32));
                    }
                }
            }
            if !to_clear.is_empty() {
                changed = true;
                for (x, y) in to_clear {
                    cur.set(x, y, false);
                }
            }
        }
        if !changed {
            return cur;
        }
    }
}

fn neighbors8(x: i64, y: i64, mask: &Mask) -> Vec<(i64, i64)> {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let mut out = Vec::new();
    for dy in -1..=1i64 {
        for dx in -1..=1i64 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let (nx, ny) = (x + dx, y + dy);
            if nx >= 0 && ny >= 0 && nx < w && ny < h && mask.at(nx as u32, ny as u32) {
                out.push((nx, ny));
            }
        }
    }
    out
}

/// 8-neighbors with corner-redundant diagonals removed: a diagonal link is
/// dropped when either shared orthogonal pixel is set, since the two pixels
/// are already connected through it. This keeps arc pixels at degree 2 where
/// plain 8-counting would see phantom junctions next to corners.
fn reduced_neighbors(x: i64, y: i64, mask: &Mask) -> Vec<(i64, i64)> {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let at = |px: i64, py: i64| px >= 0 && py >= 0 && px < w && py < h && mask.at(px as u32, py as u32);
    // Orthogonals first, then diagonals, in a fixed order.
    const OFFSETS: [(i64, i64); 8] = [
        (0, -1),
        (1, 0),
        (0, 1),
        (-1, 0),
        (1, -1),
        (1, 1),
        (-1, 1),
        (-1, -1),
    ];
    let mut out = Vec::new();
    for &(dx, dy) in &OFFSETS {
        let (nx, ny) = (x + dx, y + dy);
        if !at(nx, ny) {
            continue;
        }
        if dx != 0 && dy != 0 && (at(x + dx, y) || at(x, y + dy)) {
            continue;
        }
        out.push((nx, ny));
    }
    out
}

/// Walk a 1-pixel-wide skeleton into arcs.
///
/// Pixels are classified by their reduced 8-neighbor count (see
/// [`reduced_neighbors`]): one neighbor is an endpoint, three or more a
/// junction; both are node pixels. Each arc between node pixels becomes one
/// polyline, and a closed loop touching no node pixel becomes a polyline
/// whose first and last point coincide. Isolated pixels are ignored.
pub fn trace_polylines(skeleton: &Mask) -> Vec<Polyline> {
    let (w, h) = (skeleton.width as i64, skeleton.height as i64);
    let idx = |x: i64, y: i64| (y * w + x) as usize;
    let mut degree = vec![0u8; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            if skeleton.at(x as u32, y as u32) {
                degree[idx(x, y)] = reduced_neighbors(x, y, skeleton).len() as u8;
            }
        }
    }
    let is_node = |x: i64, y: i64, deg: &Vec<u8>| {
        let d = deg[idx(x, y)];
        d == 1 || d >= 3
    };
    // Track used directed steps so each arc is walked once.
    let mut used: std::collections::HashSet<(i64, i64, i64, i64)> = std::collections::HashSet::new();
    let mut visited = vec![false; (w * h) as usize];
    let mut out = Vec::new();

    let walk = |sx: i64,
                    sy: i64,
                    first: (i64, i64),
                    used: &mut std::collections::HashSet<(i64, i64, i64, i64)>,
                    visited: &mut Vec<bool>,
                    degree: &Vec<u8>|
     -> Option<Polyline> {
        if used.contains(&(sx, sy, first.0, first.1)) {
            return None;
        }
        let mut points = vec![Point::new(sx as f64, sy as f64)];
        let (mut px, mut py) = (sx, sy);
        let (mut cx, mut cy) = first;
        used.insert((px, py, cx, cy));
        used.insert((cx, cy, px, py));
        loop {
            points.push(Point::new(cx as f64, cy as f64));
            visited[idx(cx, cy)] = true;
            if is_node(cx, cy, degree) || (cx == sx && cy == sy) {
                break;
            }
            let next = reduced_neighbors(cx, cy, skeleton)
                .into_iter()
                .find(|&(nx, ny)| !(nx == px && ny == py));
            match next {
                Some((nx, ny)) => {
                    used.insert((cx, cy, nx, ny));
                    used.insert((nx, ny, cx, cy));
                    px = cx;
                    py = cy;
                    cx = nx;
                    cy = ny;
                }
                None => break,
            }
        }
        Some(Polyline { points })
    };

    for y in 0..h {
        for x in 0..w {
            if skeleton.at(x as u32, y as u32) && is_node(x, y, &degree) {
                visited[idx(x, y)] = true;
                for (nx, ny) in reduced_neighbors(x, y, skeleton) {
                    if let Some(p) = walk(x, y, (nx, ny), &mut used, &mut visited, &degree) {
                        out.push(p);
                    }
                }
            }
        }
    }
    // Remaining unvisited pixels are pure degree-2 cycles.
    for y in 0..h {
        for x in 0..w {
            if skeleton.at(x as u32, y as u32) && !visited[idx(x, y)] && degree[idx(x, y)] == 2 {
                visited[idx(x, y)] = true;
                let first = reduced_neighbors(x, y, skeleton)[0];
                if let Some(mut p) = walk(x, y, first, &mut used, &mut visited, &degree) {
                    // Close the loop explicitly.
                    if p.points.last() != p.points.first() {
                        p.points.push(p.points[0]);
                    }
                    out.push(p);
                }
            }
        }
    }
    out
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b - a;
    let len2 = ab.x * ab.x + ab.y * ab.y;
    if len2 == 0.0 {
        return p.dist(&a);
    }
    let t = (((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2).clamp(0.0, 1.0);
    p.dist(&Point::new(a.x + t * ab.x, a.y + t * ab.y))
}

/// Ramer-Douglas-Peucker simplification.
///
/// Endpoints are always kept and every dropped point stays within `tol` of
/// the simplified chain. `tol == 0` disables simplification entirely so the
/// input is returned unchanged.
pub fn simplify(polyline: &Polyline, tol: f64) -> Polyline {
    assert!(tol >= 0.0);
    if tol == 0.0 || polyline.points.len() <= 2 {
        return polyline.clone();
    }
    let pts = &polyline.points;
    let mut keep = vec![false; pts.len()];
    keep[0] = true;
    keep[pts.len() - 1] = true;
    let mut stack = vec![(0usize, pts.len() - 1)];
    while let Some((lo, hi)) = stack.pop() {
        if hi <= lo + 1 {
            continue;
        }
        let mut best = lo;
        let mut best_d = -1.0;
        for i in (lo + 1)..hi {
            let d = point_segment_distance(pts[i], pts[lo], pts[hi]);
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        if best_d > tol {
            keep[best] = true;
            stack.push((lo, best));
            stack.push((best, hi));
        }
    }
    Polyline {
        points: pts
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&p, _)| p)
            .collect(),
    }
}

/// Full raster-to-graph conversion.
///
/// binarize -> skeletonize -> trace -> simplify(tol) -> assemble, then a
/// final 0.5 px vertex merge. Interior polyline points become degree-2
/// vertices; arcs meeting at the same skeleton pixel share a vertex.
/// Isolated skeleton pixels survive as isolated vertices. The output carries
/// no ref_ids; a blank image yields an empty graph.
pub fn geometrize(image: &RasterImage, tol: f64) -> LineGraph {
    let mask = binarize(image);
    let skeleton = skeletonize(&mask);
    let polylines = trace_polylines(&skeleton);

    let mut graph = LineGraph::new(image.width, image.height);
    // Key pixel-exact coordinates so shared junction pixels unify.
    let mut index: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    let vertex_at = |p: Point, graph: &mut LineGraph, index: &mut BTreeMap<(i64, i64), usize>| {
        let key = (p.x as i64, p.y as i64);
        *index.entry(key).or_insert_with(|| {
            graph.vertices.push(p);
            graph.vertices.len() - 1
        })
    };
    for polyline in &polylines {
        let simplified = simplify(polyline, tol);
        let mut prev: Option<usize> = None;
        for &p in &simplified.points {
            let v = vertex_at(p, &mut graph, &mut index);
            if let Some(prev) = prev {
                if prev != v {
                    graph.edges.insert((prev.min(v), prev.max(v)));
                }
            }
            prev = Some(v);
        }
    }
    // Isolated skeleton pixels (no arcs) become isolated vertices.
    for y in 0..skeleton.height as i64 {
        for x in 0..skeleton.width as i64 {
            if skeleton.at(x as u32, y as u32) && neighbors8(x, y, &skeleton).is_empty() {
                vertex_at(Point::new(x as f64, y as f64), &mut graph, &mut index);
            }
        }
    }
    merge_close_vertices(&graph, 0.5)
}

/// Number of 8-connected components of a mask (used by thinning tests).
pub fn component_count(mask: &Mask) -> usize {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let mut seen = vec![false; (w * h) as usize];
    let mut count = 0;
    for y in 0..h {
        for x in 0..w {
            if !mask.at(x as u32, y as u32) || seen[(y * w + x) as usize] {
                continue;
            }
            count += 1;
            let mut stack = vec![(x, y)];
            seen[(y * w + x) as usize] = true;
            while let Some((cx, cy)) = stack.pop() {
                for (nx, ny) in neighbors8(cx, cy, mask) {
                    if !seen[(ny * w + nx) as usize] {
                        seen[(ny * w + nx) as usize] = true;
                        stack.push((nx, ny));
                    }
                }
            }
        }
    }
    count
}
