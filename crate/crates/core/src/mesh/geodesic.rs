//! Edge-graph geodesics (Dijkstra with Euclidean edge lengths).
//!
//! These overestimate true surface geodesics; the evaluation only needs
//! distances that are consistent across methods.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::TriMesh;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
struct State {
    dist: f64,
    vertex: usize,
}

impl Eq for State {}

impl Ord for State {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for State {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Distance from the nearest source to every vertex; unreachable vertices
/// get `+inf`.
pub fn geodesic_distances(mesh: &TriMesh, sources: &[usize]) -> Result<Vec<f64>> {
    if sources.is_empty() {
        return Err(Error::Empty("geodesic source set".into()));
    }
    let n = mesh.n();
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    for &s in sources {
        if s >= n {
            return Err(Error::IndexOutOfRange {
                index: s as i64,
                size: n,
            });
        }
        dist[s] = 0.0;
        heap.push(State { dist: 0.0, vertex: s });
    }
    let v = mesh.vertices();
    while let Some(State { dist: d, vertex: u }) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &w in &mesh.neighbors()[u] {
            let nd = d + (v[u] - v[w]).norm();
            if nd < dist[w] {
                dist[w] = nd;
                heap.push(State { dist: nd, vertex: w });
            }
        }
    }
    Ok(dist)
}

/// Mean edge-graph distance over all ordered vertex pairs (including i = j).
pub fn all_pairs_mean_distance(mesh: &TriMesh) -> Result<f64> {
    let n = mesh.n();
    let mut total = 0.0;
    for s in 0..n {
        total += geodesic_distances(mesh, &[s])?.iter().sum::<f64>();
    }
    Ok(total / (n * n) as f64)
}
