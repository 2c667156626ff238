//! K-NN shape graph over latent codes and shortest-path composition of
//! pairwise registrations.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::RegistrationResult;
use crate::error::{Error, Result};
use crate::implicit::LatentCode;
use crate::mesh::{KdTree, TriMesh, Vec3};

pub const DEFAULT_K_HUMAN: usize = 25;
pub const DEFAULT_K_ANIMAL: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub i: usize,
    pub j: usize,
    /// Mapped-edge distortion of the registrations along this edge.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeGraph {
    pub codes: Vec<LatentCode>,
    /// Undirected, `i < j`, sorted.
    pub edges: Vec<GraphEdge>,
    pub k: usize,
    pub template: usize,
}

/// Each shape selects its `k` nearest codes (ties to the lower index), and
/// the selections are symmetrized by union.
pub fn build_shape_graph(codes: &[LatentCode], k: usize, template: usize) -> Result<ShapeGraph> {
    let n = codes.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("shape graph needs at least 2 shapes, got {n}")));
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!("K must be in 1..{n}, got {k}")));
    }
    if template >= n {
        return Err(Error::IndexOutOfRange {
            index: template as i64,
            size: n,
        });
    }
    for c in codes {
        if c.dim() != codes[0].dim() {
            return Err(Error::DimensionMismatch {
                expected: codes[0].dim(),
                got: c.dim(),
            });
        }
    }
    let mut pairs = BTreeSet::new();
    for i in 0..n {
        let mut order: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (codes[i].distance(&codes[j]), j))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in order.iter().take(k) {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    Ok(ShapeGraph {
        codes: codes.to_vec(),
        edges: pairs.into_iter().map(|(i, j)| GraphEdge { i, j, weight: 0.0 }).collect(),
        k,
        template,
    })
}

impl ShapeGraph {
    pub fn n(&self) -> usize {
        self.codes.len()
    }

    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.n()];
        for e in &self.edges {
            adj[e.i].push((e.j, e.weight));
            adj[e.j].push((e.i, e.weight));
        }
        for a in adj.iter_mut() {
            a.sort_by_key(|x| x.0);
        }
        adj
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: ShapeGraph = serde_json::from_str(s)?;
        for e in &g.edges {
            if e.i >= g.n() || e.j >= g.n() {
                return Err(Error::IndexOutOfRange {
                    index: e.i.max(e.j) as i64,
                    size: g.n(),
                });
            }
            if !(e.weight >= 0.0) {
                return Err(Error::InvalidArgument(format!("negative edge weight {}", e.weight)));
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeDistortion {
    pub value: f64,
    /// Zero-length source edges left out of the mean.
    pub skipped: usize,
}

/// Mean squared relative stretch of the source edges under the map
/// `vertex i -> mapped[i]`.
pub fn edge_distortion(source: &TriMesh, mapped: &[Vec3]) -> Result<EdgeDistortion> {
    if mapped.len() != source.n() {
        return Err(Error::DimensionMismatch {
            expected: source.n(),
            got: mapped.len(),
        });
    }
    let p = source.vertices();
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut skipped = 0usize;
    for (a, b) in source.edges() {
        let rest = (p[a] - p[b]).norm();
        if rest == 0.0 {
            skipped += 1;
            continue;
        }
        let stretch = ((mapped[a] - mapped[b]).norm() - rest) / rest;
        sum += stretch * stretch;
        count += 1;
    }
    Ok(EdgeDistortion {
        value: if count == 0 { 0.0 } else { sum / count as f64 },
        skipped,
    })
}

/// Directed edge maps: `(i, j)` holds, per vertex of shape `i`, its
/// registered position on shape `j`.
pub type EdgeRegistrations = BTreeMap<(usize, usize), Vec<Vec3>>;

/// Registers every edge in both directions with `register(i, j)` and sets
/// each edge weight to the mean distortion of the two maps.
pub fn register_graph_edges<F>(graph: &mut ShapeGraph, meshes: &[TriMesh], register: F) -> Result<EdgeRegistrations>
where
    F: Fn(usize, usize) -> Result<RegistrationResult> + Sync,
{
    if meshes.len() != graph.n() {
        return Err(Error::DimensionMismatch {
            expected: graph.n(),
            got: meshes.len(),
        });
    }
    let directed: Vec<(usize, usize)> = graph.edges.iter().flat_map(|e| [(e.i, e.j), (e.j, e.i)]).collect();
    let results: Vec<(Vec<Vec3>, f64)> = directed
        .par_iter()
        .map(|&(i, j)| {
            let r = register(i, j).map_err(|e| Error::stage(&format!("edge {i}->{j}"), e))?;
            let d = edge_distortion(&meshes[i], r.deformed.vertices())?;
            Ok((r.deformed.vertices().to_vec(), d.value))
        })
        .collect::<Result<_>>()?;
    let mut maps = EdgeRegistrations::new();
    for (e, pair) in graph.edges.iter_mut().zip(results.chunks(2)) {
        e.weight = 0.5 * (pair[0].1 + pair[1].1);
    }
    for (key, (map, _)) in directed.into_iter().zip(results) {
        maps.insert(key, map);
    }
    Ok(maps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct QueueItem {
    dist: f64,
    node: usize,
}

impl Eq for QueueItem {}

impl Ord for QueueItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, then on node index
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for QueueItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Propagation {
    /// Per shape, one position per template vertex.
    pub positions: Vec<Vec<Vec3>>,
    /// Node sequence from the template to each shape.
    pub paths: Vec<Vec<usize>>,
    pub distances: Vec<f64>,
}

fn shortest_paths(graph: &ShapeGraph) -> Result<(Vec<f64>, Vec<Option<usize>>)> {
    let n = graph.n();
    let adj = graph.adjacency();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[graph.template] = 0.0;
    heap.push(QueueItem {
        dist: 0.0,
        node: graph.template,
    });
    while let Some(QueueItem { dist: d, node: u }) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        for &(v, w) in &adj[u] {
            let nd = d + w;
            let better = nd < dist[v] || (nd == dist[v] && pred[v].is_some_and(|p| u < p));
            if !done[v] && better {
                dist[v] = nd;
                pred[v] = Some(u);
                heap.push(QueueItem { dist: nd, node: v });
            }
        }
    }
    let unreachable: Vec<usize> = (0..n).filter(|&i| !dist[i].is_finite()).collect();
    if !unreachable.is_empty() {
        return Err(Error::Unreachable(unreachable));
    }
    Ok((dist, pred))
}

/// Shortest paths from the template by edge weight, composing the edge maps
/// along each path with nearest-vertex snapping at every hop.
pub fn propagate_correspondences(
    graph: &ShapeGraph,
    edge_maps: &EdgeRegistrations,
    meshes: &[TriMesh],
) -> Result<Propagation> {
    if meshes.len() != graph.n() {
        return Err(Error::DimensionMismatch {
            expected: graph.n(),
            got: meshes.len(),
        });
    }
    let (distances, pred) = shortest_paths(graph)?;
    let paths: Vec<Vec<usize>> = (0..graph.n())
        .map(|i| {
            let mut path = vec![i];
            let mut cur = i;
            while let Some(p) = pred[cur] {
                path.push(p);
                cur = p;
            }
            path.reverse();
            path
        })
        .collect();
    for path in &paths {
        for hop in path.windows(2) {
            let (a, b) = (hop[0], hop[1]);
            match edge_maps.get(&(a, b)) {
                None => {
                    return Err(Error::InvalidArgument(format!("missing registration for edge {a}->{b}")));
                }
                Some(m) if m.len() != meshes[a].n() => {
                    return Err(Error::DimensionMismatch {
                        expected: meshes[a].n(),
                        got: m.len(),
                    });
                }
                Some(_) => {}
            }
        }
    }
    let trees: Vec<KdTree> = meshes.par_iter().map(|m| KdTree::new(m.vertices())).collect();
    let start = meshes[graph.template].vertices().to_vec();
    let positions = paths
        .par_iter()
        .map(|path| {
            let mut pos = start.clone();
            for hop in path.windows(2) {
                let map = &edge_maps[&(hop[0], hop[1])];
                let tree = &trees[hop[0]];
                pos = pos
                    .iter()
                    .map(|p| map[tree.nearest(p).expect("non-empty mesh").0])
                    .collect();
            }
            pos
        })
        .collect();
    Ok(Propagation {
        positions,
        paths,
        distances,
    })
}
