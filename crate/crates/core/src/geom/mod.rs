//! Geometrized line-drawing data model.
//!
//! A line drawing is represented as a graph of endpoint vertices with 2-D
//! pixel coordinates, an undirected adjacency over them, and (for labeled
//! data) per-vertex reference IDs that identify the same underlying point
//! across frames. This module owns that representation plus its JSON
//! serialization, vertex merging, rasterization, spectral topology
//! embedding, and ground-truth matching utilities.

mod raster;
mod spectral;

pub use raster::{rasterize, Mask, RasterImage};
pub use spectral::{laplacian_eigenvalues, spectral_embedding};

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;
use thiserror::Error;

/// A 2-D point in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    /// Nearest pixel under round-half-up on both axes.
    pub fn round_pixel(&self) -> (i64, i64) {
        ((self.x + 0.5).floor() as i64, (self.y + 0.5).floor() as i64)
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid dimensions {width}x{height}")]
    BadDimensions { width: u32, height: u32 },
    #[error("vertex {index} coordinate ({x}, {y}) outside image {width}x{height}")]
    VertexOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },
    #[error("edge ({a}, {b}) is a self-loop")]
    SelfLoop { a: usize, b: usize },
    #[error("edge ({a}, {b}) references a vertex outside 0..{count}")]
    EdgeOutOfRange { a: usize, b: usize, count: usize },
    #[error("ref_ids length {got} does not match vertex count {want}")]
    RefIdLength { got: usize, want: usize },
    #[error("ref_id {id} appears at vertices {first} and {second}")]
    DuplicateRefId { id: u64, first: usize, second: usize },
    #[error("graph has no ref_ids; ground-truth matching requires them")]
    MissingRefIds,
}

/// A geometrized line drawing: vertices, undirected topology, optional
/// cross-frame reference IDs.
///
/// Edges are stored normalized as `(i, j)` with `i < j`, which makes the
/// adjacency symmetric and self-loop-free by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LineGraph {
    pub width: u32,
    pub height: u32,
    pub vertices: Vec<Point>,
    pub edges: BTreeSet<(usize, usize)>,
    pub ref_ids: Option<Vec<u64>>,
}

impl LineGraph {
    pub fn new(width: u32, height: u32) -> Self {
        LineGraph {
            width,
            height,
            vertices: Vec::new(),
            edges: BTreeSet::new(),
            ref_ids: None,
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Insert an undirected edge, normalizing the index order.
    ///
    /// Self-loops are rejected with an error rather than silently dropped.
    pub fn add_edge(&mut self, a: usize, b: usize) -> Result<(), GraphError> {
        if a == b {
            return Err(GraphError::SelfLoop { a, b });
        }
        let n = self.vertices.len();
        if a >= n || b >= n {
            return Err(GraphError::EdgeOutOfRange { a, b, count: n });
        }
        self.edges.insert((a.min(b), a.max(b)));
        Ok(())
    }

    /// Adjacency lists derived from the edge set.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Check every structural invariant, reporting the first violation.
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.width == 0 || self.height == 0 {
            return Err(GraphError::BadDimensions {
                width: self.width,
                height: self.height,
            });
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for (i, v) in self.vertices.iter().enumerate() {
            if !(v.x >= 0.0 && v.x <= w - 1.0 && v.y >= 0.0 && v.y <= h - 1.0) {
                return Err(GraphError::VertexOutOfBounds {
                    index: i,
                    x: v.x,
                    y: v.y,
                    width: self.width,
                    height: self.height,
                });
            }
        }
        let n = self.vertices.len();
        for &(a, b) in &self.edges {
            if a == b {
                return Err(GraphError::SelfLoop { a, b });
            }
            if a >= n || b >= n {
                return Err(GraphError::EdgeOutOfRange { a, b, count: n });
            }
        }
        if let Some(ids) = &self.ref_ids {
            if ids.len() != n {
                return Err(GraphError::RefIdLength {
                    got: ids.len(),
                    want: n,
                });
            }
            let mut seen = std::collections::HashMap::new();
            for (i, &id) in ids.iter().enumerate() {
                if let Some(&first) = seen.get(&id) {
                    return Err(GraphError::DuplicateRefId {
                        id,
                        first,
                        second: i,
                    });
                }
                seen.insert(id, i);
            }
        }
        Ok(())
    }

    pub fn translated(&self, dx: f64, dy: f64) -> LineGraph {
        let mut g = self.clone();
        for v in &mut g.vertices {
            v.x += dx;
            v.y += dy;
        }
        g
    }
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    width: u32,
    height: u32,
    vertices: Vec<[f64; 2]>,
    edges: Vec<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ref_ids: Option<Vec<u64>>,
}

/// Read a graph from its JSON file format and validate all invariants.
pub fn load_graph(path: impl AsRef<Path>) -> Result<LineGraph, GraphError> {
    let text = std::fs::read_to_string(path)?;
    parse_graph(&text)
}

pub fn parse_graph(text: &str) -> Result<LineGraph, GraphError> {
    let file: GraphFile = serde_json::from_str(text)?;
    let mut g = LineGraph {
        width: file.width,
        height: file.height,
        vertices: file.vertices.iter().map(|&[x, y]| Point::new(x, y)).collect(),
        edges: BTreeSet::new(),
        ref_ids: file.ref_ids,
    };
    for &[a, b] in &file.edges {
        if a == b {
            return Err(GraphError::SelfLoop { a, b });
        }
        g.edges.insert((a.min(b), a.max(b)));
    }
    g.validate()?;
    Ok(g)
}

/// Write a graph in the JSON file format; `load_graph` round-trips exactly.
pub fn save_graph(graph: &LineGraph, path: impl AsRef<Path>) -> Result<(), GraphError> {
    let text = graph_to_json(graph);
    std::fs::write(path, text)?;
    Ok(())
}

pub fn graph_to_json(graph: &LineGraph) -> String {
    let file = GraphFile {
        width: graph.width,
        height: graph.height,
        vertices: graph.vertices.iter().map(|v| [v.x, v.y]).collect(),
        edges: graph.edges.iter().map(|&(a, b)| [a, b]).collect(),
        ref_ids: graph.ref_ids.clone(),
    };
    serde_json::to_string(&file).expect("graph serialization cannot fail")
}

/// Collapse clusters of mutually close vertices.
///
/// Two vertices belong to the same cluster when they are connected through
/// the "within `eps`" relation (transitive closure, distance compared
/// inclusively). Each cluster survives as its lowest-index member, keeping
/// that member's coordinates and ref_id; edges are rewired to the survivors
/// and duplicates/self-loops dropped. Idempotent for a fixed `eps`.
pub fn merge_close_vertices(graph: &LineGraph, eps: f64) -> LineGraph {
    assert!(eps >= 0.0, "eps must be non-negative");
    let n = graph.vertices.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        let mut c = i;
        while parent[c] != r {
            let next = parent[c];
            parent[c] = r;
            c = next;
        }
        r
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if graph.vertices[i].dist(&graph.vertices[j]) <= eps {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    // Lower root wins so the representative is the lowest index.
                    let (lo, hi) = (ri.min(rj), ri.max(rj));
                    parent[hi] = lo;
                }
            }
        }
    }
    let mut new_index = vec![usize::MAX; n];
    let mut vertices = Vec::new();
    let mut ref_ids = graph.ref_ids.as_ref().map(|_| Vec::new());
    for i in 0..n {
        if find(&mut parent, i) == i {
            new_index[i] = vertices.len();
            vertices.push(graph.vertices[i]);
            if let (Some(out), Some(ids)) = (&mut ref_ids, &graph.ref_ids) {
                out.push(ids[i]);
            }
        }
    }
    for i in 0..n {
        let r = find(&mut parent, i);
        new_index[i] = new_index[r];
    }
    let mut edges = BTreeSet::new();
    for &(a, b) in &graph.edges {
        let (na, nb) = (new_index[a], new_index[b]);
        if na != nb {
            edges.insert((na.min(nb), na.max(nb)));
        }
    }
    LineGraph {
        width: graph.width,
        height: graph.height,
        vertices,
        edges,
        ref_ids,
    }
}

/// A vertex correspondence between two graphs.
///
/// Each vertex participates in at most one pair; a vertex is occluded
/// exactly when it appears in no pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
    pub occluded_0: Vec<bool>,
    pub occluded_1: Vec<bool>,
}

impl Matching {
    pub fn from_pairs(pairs: Vec<(usize, usize)>, k0: usize, k1: usize) -> Self {
        let mut occluded_0 = vec![true; k0];
        let mut occluded_1 = vec![true; k1];
        for &(i, j) in &pairs {
            occluded_0[i] = false;
            occluded_1[j] = false;
        }
        Matching {
            pairs,
            occluded_0,
            occluded_1,
        }
    }

    /// The same correspondence viewed from graph 1 to graph 0.
    pub fn flipped(&self) -> Matching {
        Matching {
            pairs: self.pairs.iter().map(|&(i, j)| (j, i)).collect(),
            occluded_0: self.occluded_1.clone(),
            occluded_1: self.occluded_0.clone(),
        }
    }

    /// Partner of vertex `i` in graph 0, if matched.
    pub fn partner_of(&self, i: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(a, _)| a == i).map(|&(_, j)| j)
    }
}

/// Ground-truth matching from shared reference IDs.
///
/// Pairs every `(i, j)` with `R0[i] == R1[j]`; everything else is occluded.
pub fn derive_matching(g0: &LineGraph, g1: &LineGraph) -> Result<Matching, GraphError> {
    let ids0 = g0.ref_ids.as_ref().ok_or(GraphError::MissingRefIds)?;
    let ids1 = g1.ref_ids.as_ref().ok_or(GraphError::MissingRefIds)?;
    let index1: std::collections::HashMap<u64, usize> =
        ids1.iter().enumerate().map(|(j, &id)| (id, j)).collect();
    let mut pairs = Vec::new();
    for (i, id) in ids0.iter().enumerate() {
        if let Some(&j) = index1.get(id) {
            pairs.push((i, j));
        }
    }
    Ok(Matching::from_pairs(pairs, g0.vertex_count(), g1.vertex_count()))
}

/// Difficulty statistics of one frame pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    /// Fraction of vertices (over both graphs) with no counterpart.
    pub occlusion_rate: f64,
    /// Mean displacement over matched pairs, in pixels.
    pub avg_shift: f64,
    /// Largest displacement over matched pairs, in pixels.
    pub max_shift: f64,
    /// Number of matched pairs; zero means the shift fields are degenerate
    /// and reported as 0.
    pub matched_pairs: usize,
}

/// Occlusion rate and displacement statistics for a labeled pair.
pub fn graph_stats(g0: &LineGraph, g1: &LineGraph) -> Result<PairStats, GraphError> {
    let matching = derive_matching(g0, g1)?;
    let total = g0.vertex_count() + g1.vertex_count();
    let matched = matching.pairs.len();
    let occlusion_rate = if total == 0 {
        0.0
    } else {
        (total - 2 * matched) as f64 / total as f64
    };
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for &(i, j) in &matching.pairs {
        let d = g0.vertices[i].dist(&g1.vertices[j]);
        sum += d;
        max = max.max(d);
    }
    let avg_shift = if matched == 0 { 0.0 } else { sum / matched as f64 };
    Ok(PairStats {
        occlusion_rate,
        avg_shift,
        max_shift: max,
        matched_pairs: matched,
    })
}
