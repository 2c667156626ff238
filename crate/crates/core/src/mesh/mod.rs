//! Indexed triangle meshes and the queries every other module builds on.

mod closest;
mod corr_io;
mod geodesic;
mod io;
pub mod shapes;
mod simplify;
mod spatial;

pub use closest::{closest_point_on_triangle, SurfaceLocator, SurfacePoint};
pub use corr_io::{read_correspondences, write_correspondences, CorrFormat, Correspondence};
pub use geodesic::{all_pairs_mean_distance, geodesic_distances};
pub use io::{load_colored_ply, load_mesh, save_mesh, write_colored_ply, MeshFormat};
pub use simplify::{simplify, SimplifyReport};
pub use spatial::{nearest_point_index, KdTree};

use std::collections::BTreeSet;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::linalg::{SparseSymMatrix, TripletBuilder};

pub type Vec3 = Vector3<f64>;

/// Triangle mesh with cached 1-ring adjacency.
///
/// Loose edges (edges not belonging to any face, e.g. OBJ `l` elements) are
/// part of the connectivity; they let path graphs and single-edge fixtures
/// be represented without degenerate triangles.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    loose_edges: Vec<[usize; 2]>,
    neighbors: Vec<Vec<usize>>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        Self::with_edges(vertices, faces, Vec::new())
    }

    pub fn with_edges(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        loose_edges: Vec<[usize; 2]>,
    ) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= n {
                    return Err(Error::IndexOutOfRange {
                        index: v as i64,
                        size: n,
                    });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} is degenerate: {f:?}"
                )));
            }
        }
        for e in &loose_edges {
            for &v in e {
                if v >= n {
                    return Err(Error::IndexOutOfRange {
                        index: v as i64,
                        size: n,
                    });
                }
            }
            if e[0] == e[1] {
                return Err(Error::InvalidMesh(format!("loose edge {e:?} is a loop")));
            }
        }
        if let Some(i) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh(format!("vertex {i} is not finite")));
        }
        let neighbors = build_neighbors(n, &faces, &loose_edges);
        Ok(Self {
            vertices,
            faces,
            loose_edges,
            neighbors,
        })
    }

    pub fn n(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn loose_edges(&self) -> &[[usize; 2]] {
        &self.loose_edges
    }

    /// Sorted 1-ring of every vertex.
    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn one_ring(&self, i: usize) -> Result<&[usize]> {
        self.neighbors
            .get(i)
            .map(Vec::as_slice)
            .ok_or(Error::IndexOutOfRange {
                index: i as i64,
                size: self.n(),
            })
    }

    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    /// Same connectivity, new positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: vertices.len(),
            });
        }
        if let Some(i) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh(format!("vertex {i} is not finite")));
        }
        Ok(Self {
            vertices,
            faces: self.faces.clone(),
            loose_edges: self.loose_edges.clone(),
            neighbors: self.neighbors.clone(),
        })
    }

    /// Positions flattened as `[x0, y0, z0, x1, ...]`.
    pub fn flat_positions(&self) -> Vec<f64> {
        flatten(&self.vertices)
    }

    pub fn same_topology(&self, other: &TriMesh) -> bool {
        self.n() == other.n() && self.faces == other.faces && self.loose_edges == other.loose_edges
    }

    pub fn bbox(&self) -> (Vec3, Vec3) {
        bbox(&self.vertices)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bbox();
        (hi - lo).norm()
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f];
        let v = &self.vertices;
        (v[b] - v[a]).cross(&(v[c] - v[a]))
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| 0.5 * self.face_normal(f).norm())
            .sum()
    }

    /// Area-weighted vertex normals (unit length where defined).
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); self.n()];
        for (fi, f) in self.faces.iter().enumerate() {
            let nrm = self.face_normal(fi);
            for &v in f {
                out[v] += nrm;
            }
        }
        for n in &mut out {
            let l = n.norm();
            if l > 0.0 {
                *n /= l;
            }
        }
        out
    }

    /// Edges used by exactly one face.
    pub fn boundary_edges(&self) -> Vec<(usize, usize)> {
        let mut count = std::collections::BTreeMap::<(usize, usize), usize>::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count
            .into_iter()
            .filter(|&(_, c)| c == 1)
            .map(|(e, _)| e)
            .collect()
    }

    pub fn transformed(&self, f: impl Fn(&Vec3) -> Vec3) -> Result<Self> {
        self.with_vertices(self.vertices.iter().map(f).collect())
    }
}

fn build_neighbors(n: usize, faces: &[[usize; 3]], loose: &[[usize; 2]]) -> Vec<Vec<usize>> {
    let mut sets = vec![BTreeSet::new(); n];
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            sets[a].insert(b);
            sets[b].insert(a);
        }
    }
    for e in loose {
        sets[e[0]].insert(e[1]);
        sets[e[1]].insert(e[0]);
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

pub fn bbox(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

pub fn flatten(points: &[Vec3]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

pub fn unflatten(flat: &[f64]) -> Vec<Vec3> {
    flat.chunks_exact(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect()
}

/// Combinatorial graph Laplacian: `L_ii = |N_i|`, `L_ij = -1` for neighbors.
pub fn graph_laplacian(mesh: &TriMesh) -> SparseSymMatrix {
    let n = mesh.n();
    let mut t = TripletBuilder::with_capacity(n, n + 2 * mesh.edges().len());
    for (i, nb) in mesh.neighbors().iter().enumerate() {
        t.add(i, i, nb.len() as f64);
        for &j in nb {
            t.add(i, j, -1.0);
        }
    }
    t.build_unchecked()
}
