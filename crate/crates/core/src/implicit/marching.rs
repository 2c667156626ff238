//! Marching cubes over a regular voxel grid.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tables::{EDGE_TABLE, TRI_TABLE};
use super::{ImplicitGenerator, LatentCode};
use crate::error::{Error, Result};
use crate::mesh::{TriMesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub origin: Vec3,
    pub spacing: Vec3,
    pub dims: [usize; 3],
}

impl VoxelGrid {
    pub fn new(origin: Vec3, spacing: Vec3, dims: [usize; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("grid spacing must be positive, got {spacing:?}")));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidArgument(format!("grid needs at least 2 samples per axis, got {dims:?}")));
        }
        Ok(VoxelGrid { origin, spacing, dims })
    }

    /// Axis-aligned box `[lo, hi]` sampled with `dims` points per axis.
    pub fn bounding(lo: Vec3, hi: Vec3, dims: [usize; 3]) -> Result<Self> {
        let mut spacing = Vec3::zeros();
        for k in 0..3 {
            spacing[k] = (hi[k] - lo[k]) / (dims[k].max(2) - 1) as f64;
        }
        VoxelGrid::new(lo, spacing, dims)
    }

    /// Cube of half-width `half` around `center` with `n` samples per axis.
    pub fn cube(center: Vec3, half: f64, n: usize) -> Result<Self> {
        VoxelGrid::bounding(center - Vec3::repeat(half), center + Vec3::repeat(half), [n, n, n])
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64).component_mul(&self.spacing)
    }

    pub fn max_spacing(&self) -> f64 {
        self.spacing.max()
    }

    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub mesh: TriMesh,
    /// The level set reaches the grid boundary, so the mesh has open borders.
    pub clipped: bool,
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Interpolation parameters this close to an endpoint reuse the grid corner,
/// so coincident vertices are welded.
const SNAP: f64 = 1e-9;

/// Zero level set of `gen(., z)` inside `grid`, oriented with normals along
/// the field gradient (outward for negative-inside fields).
pub fn marching_cubes(gen: &ImplicitGenerator, z: &LatentCode, grid: &VoxelGrid) -> Result<Extraction> {
    if z.dim() != gen.latent_dim() {
        return Err(Error::DimensionMismatch {
            expected: gen.latent_dim(),
            got: z.dim(),
        });
    }
    let [nx, ny, nz] = grid.dims;
    let zs = z.as_slice();
    let values: Vec<f64> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let mut slab = Vec::with_capacity(nx * ny);
            for j in 0..ny {
                for i in 0..nx {
                    slab.push(gen.value_unchecked(&grid.point(i, j, k), zs));
                }
            }
            slab
        })
        .collect::<Vec<_>>()
        .concat();
    if let Some(p) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite field value at grid sample {p}")));
    }

    let mut verts: Vec<Vec3> = Vec::new();
    let mut lookup: HashMap<usize, usize> = HashMap::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut seen_faces = std::collections::HashSet::new();
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut corner_idx = [0usize; 8];
                let mut case = 0usize;
                for (c, off) in CORNERS.iter().enumerate() {
                    let g = grid.index(i + off[0], j + off[1], k + off[2]);
                    corner_idx[c] = g;
                    if values[g] < 0.0 {
                        case |= 1 << c;
                    }
                }
                let mask = EDGE_TABLE[case];
                if mask == 0 {
                    continue;
                }
                let mut edge_vert = [usize::MAX; 12];
                for (e, &[ca, cb]) in EDGES.iter().enumerate() {
                    if mask & (1 << e) == 0 {
                        continue;
                    }
                    // order endpoints so the key is shared by neighboring cubes
                    let (pa, pb) = if corner_idx[ca] < corner_idx[cb] {
                        (ca, cb)
                    } else {
                        (cb, ca)
                    };
                    let (ga, gb) = (corner_idx[pa], corner_idx[pb]);
                    let (fa, fb) = (values[ga], values[gb]);
                    let t = fa / (fa - fb);
                    let axis = (0..3).find(|&a| CORNERS[pa][a] != CORNERS[pb][a]).unwrap();
                    let key = if t <= SNAP {
                        4 * ga + 3
                    } else if t >= 1.0 - SNAP {
                        4 * gb + 3
                    } else {
                        4 * ga + axis
                    };
                    let id = *lookup.entry(key).or_insert_with(|| {
                        let a = grid.point(i + CORNERS[pa][0], j + CORNERS[pa][1], k + CORNERS[pa][2]);
                        let b = grid.point(i + CORNERS[pb][0], j + CORNERS[pb][1], k + CORNERS[pb][2]);
                        let t = t.clamp(0.0, 1.0);
                        let p = if t <= SNAP {
                            a
                        } else if t >= 1.0 - SNAP {
                            b
                        } else {
                            a + (b - a) * t
                        };
                        verts.push(p);
                        verts.len() - 1
                    });
                    edge_vert[e] = id;
                }
                for tri in TRI_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let f = [
                        edge_vert[tri[0] as usize],
                        edge_vert[tri[1] as usize],
                        edge_vert[tri[2] as usize],
                    ];
                    if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                        continue;
                    }
                    let mut key = f;
                    key.sort_unstable();
                    if seen_faces.insert(key) {
                        faces.push(f);
                    }
                }
            }
        }
    }
    if faces.is_empty() {
        return Err(Error::EmptySurface);
    }

    // drop vertices only used by discarded degenerate triangles
    let mut remap = vec![usize::MAX; verts.len()];
    let mut compact = Vec::with_capacity(verts.len());
    for f in faces.iter_mut() {
        for v in f.iter_mut() {
            if remap[*v] == usize::MAX {
                remap[*v] = compact.len();
                compact.push(verts[*v]);
            }
            *v = remap[*v];
        }
    }

    // global orientation by majority vote of normal . gradient
    let vote: i64 = faces
        .par_iter()
        .map(|f| {
            let (a, b, c) = (compact[f[0]], compact[f[1]], compact[f[2]]);
            let n = (b - a).cross(&(c - a));
            let g = gen.sample_unchecked(&((a + b + c) / 3.0), zs).grad_x;
            match n.dot(&g) {
                d if d > 0.0 => 1,
                d if d < 0.0 => -1,
                _ => 0,
            }
        })
        .sum();
    if vote < 0 {
        for f in faces.iter_mut() {
            f.swap(1, 2);
        }
    }

    let mut clipped = false;
    'outer: for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let on_border = i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1;
                if on_border && values[grid.index(i, j, k)] < 0.0 {
                    clipped = true;
                    break 'outer;
                }
            }
        }
    }
    if clipped {
        log::warn!("level set is clipped by the grid boundary; extracted mesh is open");
    }
    Ok(Extraction {
        mesh: TriMesh::new(compact, faces)?,
        clipped,
    })
}
