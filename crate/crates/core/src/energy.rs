//! Infinitesimal ARAP / ACAP deformation energies as sparse quadratic forms.
//!
//! For a displacement field `d` on a mesh with edge vectors
//! `e_ij = g_i - g_j`, the ARAP energy is
//!
//! ```text
//! sum_i min_{c_i} sum_{j in N_i} | c_i x e_ij - (d_i - d_j) |^2
//! ```
//!
//! and ACAP additionally minimizes over a per-vertex scale `s_i` applied as
//! `s_i e_ij`. Both inner problems are linear least squares, so eliminating
//! the local unknowns leaves a quadratic form `d^T M d` with
//! `M = 2 L (x) I_3 - sum_i K_i^T A_i^{-1} K_i`, where `A_i` is the local
//! normal matrix and `K_i` maps `d` to the local right-hand side.
//!
//! The oracles evaluate the left-hand side directly by solving each local
//! least-squares problem with an SVD and summing residuals.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{SparseSymMatrix, TripletBuilder};
use crate::mesh::{TriMesh, Vec3};

/// Default weight of the ARAP term in the combined form.
pub const DEFAULT_ALPHA: f64 = 10.0;

/// Relative eigenvalue floor below which a local normal matrix is treated as
/// singular and shifted by the same amount times its trace.
const LOCAL_REGULARIZATION: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyKind {
    Arap,
    Acap,
    Combined,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyDiagnostics {
    /// Vertices with an empty 1-ring (no local term).
    pub isolated_vertices: Vec<usize>,
    /// Vertices whose local normal matrix needed the trace-scaled shift.
    pub regularized_vertices: Vec<usize>,
}

/// Sparse symmetric PSD matrix of size `3n x 3n` representing a deformation
/// energy on a fixed mesh.
#[derive(Debug, Clone)]
pub struct DeformQuadForm {
    matrix: SparseSymMatrix,
    kind: EnergyKind,
    alpha: f64,
    diagnostics: EnergyDiagnostics,
}

impl DeformQuadForm {
    pub fn matrix(&self) -> &SparseSymMatrix {
        &self.matrix
    }

    pub fn kind(&self) -> EnergyKind {
        self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn diagnostics(&self) -> &EnergyDiagnostics {
        &self.diagnostics
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    /// `d^T M d` for a flattened field of length `3n`.
    pub fn energy(&self, d: &[f64]) -> Result<f64> {
        if d.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: d.len(),
            });
        }
        Ok(self.matrix.quad_form(d))
    }

    pub fn write_matrix_market(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.matrix
            .write_matrix_market(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LocalModel {
    /// `c x e`, 3 unknowns
    Rotation,
    /// `s e + c x e`, 4 unknowns
    Similarity,
}

impl LocalModel {
    fn unknowns(self) -> usize {
        match self {
            LocalModel::Rotation => 3,
            LocalModel::Similarity => 4,
        }
    }

    /// 3 x k Jacobian of the local model applied to edge `e`.
    fn jacobian(self, e: &Vec3) -> DMatrix<f64> {
        // c x e = -[e]x c
        let ex = -e.cross_matrix();
        match self {
            LocalModel::Rotation => DMatrix::from_iterator(3, 3, ex.iter().copied()),
            LocalModel::Similarity => {
                let mut j = DMatrix::zeros(3, 4);
                j.column_mut(0).copy_from(e);
                j.view_mut((0, 1), (3, 3)).copy_from(&ex);
                j
            }
        }
    }
}

struct LocalBlock {
    dofs: Vec<usize>,
    mat: DMatrix<f64>,
    regularized: bool,
}

fn local_block(mesh: &TriMesh, i: usize, model: LocalModel) -> Option<LocalBlock> {
    let nb = &mesh.neighbors()[i];
    if nb.is_empty() {
        return None;
    }
    let k = model.unknowns();
    let m = nb.len();
    let v = mesh.vertices();
    let size = 3 * (m + 1);
    let mut mat = DMatrix::<f64>::zeros(size, size);
    let mut a = DMatrix::<f64>::zeros(k, k);
    // K maps local d to b = sum_j J_j^T (d_i - d_j)
    let mut kmap = DMatrix::<f64>::zeros(k, size);
    for (slot, &j) in nb.iter().enumerate() {
        let e = v[i] - v[j];
        let jac = model.jacobian(&e);
        let jt = jac.transpose();
        a += &jt * &jac;
        let col = 3 * (slot + 1);
        for r in 0..k {
            for c in 0..3 {
                kmap[(r, c)] += jt[(r, c)];
                kmap[(r, col + c)] -= jt[(r, c)];
            }
        }
        for c in 0..3 {
            mat[(c, c)] += 1.0;
            mat[(col + c, col + c)] += 1.0;
            mat[(c, col + c)] -= 1.0;
            mat[(col + c, c)] -= 1.0;
        }
    }
    let tr = a.trace();
    let eig = a.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let regularized = min < LOCAL_REGULARIZATION * tr;
    if regularized {
        for r in 0..k {
            a[(r, r)] += LOCAL_REGULARIZATION * tr;
        }
    }
    let a_inv = a
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .unwrap_or_else(|| crate::linalg::symmetric_pinv(&a, 1e-14));
    mat -= kmap.transpose() * a_inv * &kmap;
    let mut dofs = Vec::with_capacity(m + 1);
    dofs.push(i);
    dofs.extend_from_slice(nb);
    Some(LocalBlock {
        dofs,
        mat,
        regularized,
    })
}

fn assemble(mesh: &TriMesh, model: LocalModel) -> (SparseSymMatrix, EnergyDiagnostics) {
    let n = mesh.n();
    let blocks: Vec<Option<LocalBlock>> = (0..n)
        .into_par_iter()
        .map(|i| local_block(mesh, i, model))
        .collect();
    let cap: usize = blocks
        .iter()
        .flatten()
        .map(|b| b.mat.len())
        .sum();
    let mut t = TripletBuilder::with_capacity(3 * n, cap);
    let mut diag = EnergyDiagnostics::default();
    for (i, b) in blocks.iter().enumerate() {
        let Some(b) = b else {
            diag.isolated_vertices.push(i);
            continue;
        };
        if b.regularized {
            diag.regularized_vertices.push(i);
        }
        for (ra, &va) in b.dofs.iter().enumerate() {
            for (rb, &vb) in b.dofs.iter().enumerate() {
                for p in 0..3 {
                    for q in 0..3 {
                        let val = b.mat[(3 * ra + p, 3 * rb + q)];
                        if val != 0.0 {
                            t.add(3 * va + p, 3 * vb + q, val);
                        }
                    }
                }
            }
        }
    }
    let mut m = t.build_unchecked();
    symmetrize(&mut m);
    (m, diag)
}

/// Averages (i,j) and (j,i) to remove rounding asymmetry from the local
/// inverse products.
fn symmetrize(m: &mut SparseSymMatrix) {
    let dim = m.dim();
    let mut t = TripletBuilder::with_capacity(dim, m.nnz());
    for (i, j, v) in m.entries() {
        let w = m.get(j, i);
        t.add(i, j, 0.5 * (v + w));
    }
    *m = t.build_unchecked();
}

pub fn build_arap(mesh: &TriMesh) -> DeformQuadForm {
    let (matrix, diagnostics) = assemble(mesh, LocalModel::Rotation);
    DeformQuadForm {
        matrix,
        kind: EnergyKind::Arap,
        alpha: 1.0,
        diagnostics,
    }
}

pub fn build_acap(mesh: &TriMesh) -> DeformQuadForm {
    let (matrix, diagnostics) = assemble(mesh, LocalModel::Similarity);
    DeformQuadForm {
        matrix,
        kind: EnergyKind::Acap,
        alpha: 0.0,
        diagnostics,
    }
}

/// `alpha * ARAP + ACAP`.
pub fn build_combined(mesh: &TriMesh, alpha: f64) -> Result<DeformQuadForm> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
    }
    let arap = build_arap(mesh);
    let acap = build_acap(mesh);
    let matrix = arap.matrix.linear_combination(alpha, &acap.matrix, 1.0)?;
    let mut diagnostics = arap.diagnostics;
    for v in acap.diagnostics.regularized_vertices {
        if !diagnostics.regularized_vertices.contains(&v) {
            diagnostics.regularized_vertices.push(v);
        }
    }
    diagnostics.regularized_vertices.sort_unstable();
    Ok(DeformQuadForm {
        matrix,
        kind: EnergyKind::Combined,
        alpha,
        diagnostics,
    })
}

fn oracle(mesh: &TriMesh, d: &[f64], model: LocalModel) -> Result<f64> {
    let n = mesh.n();
    if d.len() != 3 * n {
        return Err(Error::DimensionMismatch {
            expected: 3 * n,
            got: d.len(),
        });
    }
    let v = mesh.vertices();
    let disp = |i: usize| Vec3::new(d[3 * i], d[3 * i + 1], d[3 * i + 2]);
    let k = model.unknowns();
    let mut total = 0.0;
    for i in 0..n {
        let nb = &mesh.neighbors()[i];
        if nb.is_empty() {
            continue;
        }
        let m = nb.len();
        let mut jac = DMatrix::zeros(3 * m, k);
        let mut rhs = DVector::zeros(3 * m);
        for (slot, &j) in nb.iter().enumerate() {
            let e = v[i] - v[j];
            jac.view_mut((3 * slot, 0), (3, k)).copy_from(&model.jacobian(&e));
            let u = disp(i) - disp(j);
            rhs.rows_mut(3 * slot, 3).copy_from(&u);
        }
        // minimum-norm least squares; singular 1-rings fall back to the
        // pseudoinverse through the SVD cutoff
        let svd = jac.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let x = svd
            .solve(&rhs, 1e-12 * smax.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::Numerical(e.to_string()))?;
        total += (&jac * x - &rhs).norm_squared();
    }
    Ok(total)
}

/// Direct evaluation of the ARAP potential by per-vertex 3x3 least squares.
pub fn arap_energy_oracle(mesh: &TriMesh, d: &[f64]) -> Result<f64> {
    oracle(mesh, d, LocalModel::Rotation)
}

/// Direct evaluation of the ACAP potential by per-vertex 4x4 least squares.
pub fn acap_energy_oracle(mesh: &TriMesh, d: &[f64]) -> Result<f64> {
    oracle(mesh, d, LocalModel::Similarity)
}

/// Infinitesimal similarity field `s g_i + c x g_i + t`.
pub fn similarity_field(mesh: &TriMesh, s: f64, c: &Vec3, t: &Vec3) -> Vec<f64> {
    mesh.vertices()
        .iter()
        .flat_map(|g| {
            let d = g * s + c.cross(g) + t;
            [d.x, d.y, d.z]
        })
        .collect()
}
