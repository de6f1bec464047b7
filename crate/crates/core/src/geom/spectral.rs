//! Spectral topology embedding from the graph Laplacian.

use super::LineGraph;
use crate::tensor::Tensor;
use nalgebra::DMatrix;

/// Eigenvalues within this distance form a multiplet and their eigenvector
/// order is fixed by the sign-normalization entry instead of the eigenvalue.
const MULTIPLET_TOL: f64 = 1e-9;

/// Per-vertex coordinates from the eigenvectors of the unnormalized graph
/// Laplacian `L = D - T`.
///
/// Eigenvectors are taken in ascending eigenvalue order, skipping the zero
/// eigenspace (one constant vector per connected component). Each kept
/// column is sign-normalized so that its largest-absolute entry is positive
/// (ties broken by the lowest vertex index); columns inside a near-degenerate
/// multiplet are ordered by the index of that sign-fixing entry. When fewer
/// than `dim` usable eigenvectors exist the remaining columns stay zero.
pub fn spectral_embedding(graph: &LineGraph, dim: usize) -> Tensor {
    assert!(dim >= 1);
    let k = graph.vertex_count();
    let mut out = Tensor::zeros(&[k, dim]);
    if k == 0 {
        return out;
    }
    let mut lap = DMatrix::<f64>::zeros(k, k);
    for &(a, b) in &graph.edges {
        lap[(a, b)] = -1.0;
        lap[(b, a)] = -1.0;
        lap[(a, a)] += 1.0;
        lap[(b, b)] += 1.0;
    }
    let eig = lap.symmetric_eigen();
    // Sort eigenpairs by ascending eigenvalue.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    struct Column {
        value: f64,
        fix_index: usize,
        data: Vec<f64>,
    }
    let mut columns: Vec<Column> = Vec::new();
    for &idx in &order {
        let value = eig.eigenvalues[idx];
        if value.abs() <= MULTIPLET_TOL {
            continue; // zero eigenspace: per-component constant vectors
        }
        let col = eig.eigenvectors.column(idx);
        let mut fix_index = 0;
        let mut best = -1.0;
        for (i, &v) in col.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                fix_index = i;
            }
        }
        let flip = if col[fix_index] < 0.0 { -1.0 } else { 1.0 };
        columns.push(Column {
            value,
            fix_index,
            data: col.iter().map(|&v| v * flip).collect(),
        });
    }
    // Reorder within multiplets by the sign-fixing entry's vertex index.
    let mut start = 0;
    while start < columns.len() {
        let mut end = start + 1;
        while end < columns.len() && columns[end].value - columns[end - 1].value <= MULTIPLET_TOL {
            end += 1;
        }
        columns[start..end].sort_by_key(|c| c.fix_index);
        start = end;
    }
    for (c, column) in columns.iter().take(dim).enumerate() {
        for (r, &v) in column.data.iter().enumerate() {
            out.data[r * dim + c] = v;
        }
    }
    out
}

/// Eigenvalues of the unnormalized Laplacian, ascending (test oracle helper).
pub fn laplacian_eigenvalues(graph: &LineGraph) -> Vec<f64> {
    let k = graph.vertex_count();
    let mut lap = DMatrix::<f64>::zeros(k, k);
    for &(a, b) in &graph.edges {
        lap[(a, b)] = -1.0;
        lap[(b, a)] = -1.0;
        lap[(a, a)] += 1.0;
        lap[(b, b)] += 1.0;
    }
    let mut ev: Vec<f64> = lap.symmetric_eigen().eigenvalues.iter().cloned().collect();
    ev.sort_by(f64::total_cmp);
    ev
}
