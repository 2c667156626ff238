//! Induced correspondences between adjacent level sets.
//!
//! For a mesh `g` of the level set `f(., z) = 0` and a latent direction `v`,
//! the displacement `d` moving `g` onto `f(., z + eps v) = 0` minimizes
//! `d^T L d + mu |d|^2` subject to one linearized normal constraint per
//! vertex, `grad_x f(g_i)^T d_i = -eps grad_z f(g_i)^T v`.
//!
//! The constraint is eliminated per vertex: `d_i = n_i r_i / |grad_x| + T_i w_i`
//! with an orthonormal tangent pair `T_i`, which leaves a sparse SPD system in
//! the tangential unknowns `w`. A dense KKT solve is kept as a reference.

mod regularizers;

pub use regularizers::{
    advect, ball_volume, cycle_residual, cycle_residual_on_grid, r_geo, three_cycle_residual, trace_e, AdvectOptions,
    CycleOptions, CycleReport, GeoOptions, GeoReport, TraceMode, DEFAULT_EPS_CYC, DEFAULT_PROBES, EXACT_TRACE_MAX_DIM,
};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::DeformQuadForm;
use crate::error::{Error, Result};
use crate::implicit::{ImplicitGenerator, LatentCode};
use crate::linalg::{symmetric_pinv, SparseCholesky, SparseSymMatrix, TripletBuilder};
use crate::mesh::{TriMesh, Vec3};

/// Spatial gradients shorter than this do not define a usable normal.
pub const MIN_GRADIENT_NORM: f64 = 1e-8;

/// Default level-set step.
pub const DEFAULT_EPSILON: f64 = 1e-3;

const LIMIT_MAX_ITERS: usize = 50;
const LIMIT_RTOL: f64 = 1e-13;

/// `1e-6 * trace(L) / (3n)`.
pub fn default_mu(form: &DeformQuadForm) -> f64 {
    let dim = form.dim().max(1);
    1e-6 * form.matrix().trace() / dim as f64
}

/// Linearized level-set constraints `C d = -eps F v` on a mesh.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    mesh: TriMesh,
    z: LatentCode,
    /// Vertex index per constraint row.
    rows: Vec<usize>,
    /// `grad_x f` per row.
    normals: Vec<Vec3>,
    /// `grad_z f` per row, `rows x d`.
    latent: DMatrix<f64>,
    dropped: Vec<usize>,
}

/// Evaluates `grad_x` and `grad_z` at every vertex. Vertices with a
/// near-zero spatial gradient get no constraint row.
pub fn build_constraints(gen: &ImplicitGenerator, mesh: &TriMesh, z: &LatentCode) -> Result<ConstraintSystem> {
    if z.dim() != gen.latent_dim() {
        return Err(Error::DimensionMismatch {
            expected: gen.latent_dim(),
            got: z.dim(),
        });
    }
    let samples: Vec<_> = mesh
        .vertices()
        .par_iter()
        .map(|p| gen.sample_unchecked(p, z.as_slice()))
        .collect();
    let d = z.dim();
    let mut rows = Vec::new();
    let mut normals = Vec::new();
    let mut latent = Vec::new();
    let mut dropped = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if !s.grad_x.iter().all(|v| v.is_finite()) || !s.grad_z.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite field gradient at vertex {i}")));
        }
        if s.grad_x.norm() < MIN_GRADIENT_NORM {
            dropped.push(i);
            continue;
        }
        rows.push(i);
        normals.push(s.grad_x);
        latent.extend_from_slice(&s.grad_z);
    }
    if rows.is_empty() {
        return Err(Error::DegenerateConstraints(mesh.n()));
    }
    if !dropped.is_empty() {
        log::warn!("{} vertices with degenerate normals lost their constraint", dropped.len());
    }
    let latent = DMatrix::from_row_slice(rows.len(), d, &latent);
    Ok(ConstraintSystem {
        mesh: mesh.clone(),
        z: z.clone(),
        rows,
        normals,
        latent,
        dropped,
    })
}

impl ConstraintSystem {
    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn z(&self) -> &LatentCode {
        &self.z
    }

    pub fn latent_dim(&self) -> usize {
        self.latent.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row_vertices(&self) -> &[usize] {
        &self.rows
    }

    pub fn dropped_vertices(&self) -> &[usize] {
        &self.dropped
    }

    /// `grad_x f` for constraint row `r`.
    pub fn normal(&self, r: usize) -> Vec3 {
        self.normals[r]
    }

    /// Latent gradients, one row per constraint.
    pub fn latent_gradients(&self) -> &DMatrix<f64> {
        &self.latent
    }

    /// Dense `C` (rows x 3n).
    pub fn dense_c(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.rows.len(), 3 * self.mesh.n());
        for (r, (&i, g)) in self.rows.iter().zip(&self.normals).enumerate() {
            for k in 0..3 {
                c[(r, 3 * i + k)] = g[k];
            }
        }
        c
    }

    /// `-eps F v`, the right-hand side of the constraints.
    pub fn rhs(&self, v: &[f64], epsilon: f64) -> Result<Vec<f64>> {
        if v.len() != self.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim(),
                got: v.len(),
            });
        }
        let fv = &self.latent * DVector::from_column_slice(v);
        Ok(fv.iter().map(|x| -epsilon * x).collect())
    }

    /// `|C d + eps F v|_inf`.
    pub fn constraint_residual(&self, d: &[f64], v: &[f64], epsilon: f64) -> Result<f64> {
        let rhs = self.rhs(v, epsilon)?;
        Ok(self
            .rows
            .iter()
            .zip(&self.normals)
            .zip(&rhs)
            .map(|((&i, g), r)| (g.x * d[3 * i] + g.y * d[3 * i + 1] + g.z * d[3 * i + 2] - r).abs())
            .fold(0.0, f64::max))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub dropped_constraints: usize,
    pub constraint_residual: f64,
    /// `|(L + mu I) d + C^T lambda|_inf`.
    pub kkt_residual: f64,
    /// `|L|_inf |d|_inf`, the scale the KKT residual is compared against.
    pub kkt_scale: f64,
    /// `d^T L d + mu |d|^2`.
    pub objective: f64,
    pub mu: f64,
    /// The reduced system was singular and a minimum-norm solve was used.
    pub min_norm_fallback: bool,
}

/// Displacement `d^v` with its multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceField {
    pub d: Vec<f64>,
    pub v: Vec<f64>,
    pub epsilon: f64,
    /// One per constraint row.
    pub multipliers: Vec<f64>,
    pub diagnostics: SolveDiagnostics,
}

enum Reduced {
    Sparse(SparseCholesky),
    Dense(DMatrix<f64>),
}

/// Per-vertex frame: unit normal, gradient norm and tangent pair for
/// constrained vertices.
#[derive(Clone, Copy)]
struct Frame {
    normal: Vec3,
    grad_norm: f64,
    tangents: [Vec3; 2],
}

fn tangent_pair(n: &Vec3) -> [Vec3; 2] {
    let axis = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vec3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let t1 = n.cross(&axis).normalize();
    let t2 = n.cross(&t1);
    [t1, t2]
}

/// Factorized constrained solver for one `(L, C)` pair; reusable across
/// latent directions.
pub struct InducedSolver<'a> {
    form: &'a DeformQuadForm,
    cs: &'a ConstraintSystem,
    mu: f64,
    shifted: SparseSymMatrix,
    frames: Vec<Option<Frame>>,
    /// Row of each vertex in the constraint system.
    row_of: Vec<Option<usize>>,
    offsets: Vec<usize>,
    reduced_dim: usize,
    reduced: Reduced,
}

impl<'a> InducedSolver<'a> {
    pub fn new(form: &'a DeformQuadForm, cs: &'a ConstraintSystem, mu: f64) -> Result<Self> {
        let n = cs.mesh.n();
        if form.dim() != 3 * n {
            return Err(Error::DimensionMismatch {
                expected: 3 * n,
                got: form.dim(),
            });
        }
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(Error::InvalidArgument(format!("mu must be a finite value >= 0, got {mu}")));
        }
        let mut frames = vec![None; n];
        let mut row_of = vec![None; n];
        for (r, (&i, g)) in cs.rows.iter().zip(&cs.normals).enumerate() {
            let len = g.norm();
            let normal = g / len;
            frames[i] = Some(Frame {
                normal,
                grad_norm: len,
                tangents: tangent_pair(&normal),
            });
            row_of[i] = Some(r);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut k = 0;
        for f in &frames {
            offsets.push(k);
            k += if f.is_some() { 2 } else { 3 };
        }
        offsets.push(k);
        let shifted = form.matrix().shifted(mu);

        let basis = |i: usize, a: usize, p: usize| -> f64 {
            match &frames[i] {
                Some(f) => f.tangents[p][a],
                None => f64::from(u8::from(a == p)),
            }
        };
        let mut t = TripletBuilder::with_capacity(k, shifted.nnz() * 4);
        for (r, c, val) in shifted.entries() {
            let (i, a) = (r / 3, r % 3);
            let (j, b) = (c / 3, c % 3);
            let ki = offsets[i + 1] - offsets[i];
            let kj = offsets[j + 1] - offsets[j];
            for p in 0..ki {
                let bp = basis(i, a, p);
                if bp == 0.0 {
                    continue;
                }
                for q in 0..kj {
                    let bq = basis(j, b, q);
                    if bq != 0.0 {
                        t.add(offsets[i] + p, offsets[j] + q, bp * val * bq);
                    }
                }
            }
        }
        let reduced_matrix = t.build_unchecked();
        let reduced = match SparseCholesky::factor(&reduced_matrix) {
            Ok(ch) => Reduced::Sparse(ch),
            Err(Error::NotPositiveDefinite { .. }) => {
                log::warn!("reduced system is singular (mu = {mu:e}); using a minimum-norm solve");
                let dense = reduced_matrix.to_dense();
                let sym = (&dense + dense.transpose()) * 0.5;
                Reduced::Dense(symmetric_pinv(&sym, 1e-12))
            }
            Err(e) => return Err(e),
        };
        Ok(InducedSolver {
            form,
            cs,
            mu,
            shifted,
            frames,
            row_of,
            offsets,
            reduced_dim: k,
            reduced,
        })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn constraints(&self) -> &ConstraintSystem {
        self.cs
    }

    pub fn form(&self) -> &DeformQuadForm {
        self.form
    }

    /// Minimizer of `d^T (L + mu I) d` subject to `C d = rhs`.
    pub fn solve_rhs(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        self.solve_reduced(rhs, 0)
    }

    /// Minimum-norm minimizer of `d^T L d` subject to `C d = rhs`, the
    /// `mu -> 0` limit, by proximal refinement on the shifted factor.
    pub fn solve_rhs_limit(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        self.solve_reduced(rhs, LIMIT_MAX_ITERS)
    }

    fn solve_reduced(&self, rhs: &[f64], max_refine: usize) -> Result<Vec<f64>> {
        if rhs.len() != self.cs.n_rows() {
            return Err(Error::DimensionMismatch {
                expected: self.cs.n_rows(),
                got: rhs.len(),
            });
        }
        let n = self.cs.mesh.n();
        let mut d0 = vec![0.0; 3 * n];
        for (r, &i) in self.cs.rows.iter().enumerate() {
            let f = self.frames[i].as_ref().expect("constrained vertex has a frame");
            let s = rhs[r] / f.grad_norm;
            for a in 0..3 {
                d0[3 * i + a] = f.normal[a] * s;
            }
        }
        let md0 = self.shifted.mul_vec(&d0);
        let mut b = vec![0.0; self.reduced_dim];
        self.project(&md0, &mut b, -1.0);
        let apply = |b: Vec<f64>| -> Vec<f64> {
            match &self.reduced {
                Reduced::Sparse(ch) => ch.solve(&b),
                Reduced::Dense(pinv) => (pinv * DVector::from_vec(b)).iter().copied().collect(),
            }
        };
        let mut w = apply(b.clone());
        if matches!(self.reduced, Reduced::Sparse(_)) && self.mu > 0.0 {
            for _ in 0..max_refine {
                let shifted_b: Vec<f64> = b.iter().zip(&w).map(|(bi, wi)| bi + self.mu * wi).collect();
                let next = apply(shifted_b);
                let step = next.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let size = next.iter().map(|a| a * a).sum::<f64>().sqrt();
                w = next;
                if step <= LIMIT_RTOL * size {
                    break;
                }
            }
        }
        let mut d = d0;
        for i in 0..n {
            let o = self.offsets[i];
            match &self.frames[i] {
                Some(f) => {
                    for a in 0..3 {
                        d[3 * i + a] += f.tangents[0][a] * w[o] + f.tangents[1][a] * w[o + 1];
                    }
                }
                None => {
                    for a in 0..3 {
                        d[3 * i + a] += w[o + a];
                    }
                }
            }
        }
        if d.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite displacement".into()));
        }
        Ok(d)
    }

    /// `out += scale * P^T x`.
    fn project(&self, x: &[f64], out: &mut [f64], scale: f64) {
        for (i, f) in self.frames.iter().enumerate() {
            let o = self.offsets[i];
            let xi = Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]);
            match f {
                Some(f) => {
                    out[o] += scale * f.tangents[0].dot(&xi);
                    out[o + 1] += scale * f.tangents[1].dot(&xi);
                }
                None => {
                    for a in 0..3 {
                        out[o + a] += scale * xi[a];
                    }
                }
            }
        }
    }

    /// Solves for `d^v` and reports constraint/KKT diagnostics.
    pub fn solve(&self, v: &[f64], epsilon: f64) -> Result<CorrespondenceField> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("latent direction is not finite".into()));
        }
        let rhs = self.cs.rhs(v, epsilon)?;
        let d = self.solve_rhs(&rhs)?;
        let md = self.shifted.mul_vec(&d);
        let mut multipliers = Vec::with_capacity(self.cs.n_rows());
        let mut stationarity = md.clone();
        for (&i, g) in self.cs.rows.iter().zip(&self.cs.normals) {
            let mi = Vec3::new(md[3 * i], md[3 * i + 1], md[3 * i + 2]);
            let lam = -g.dot(&mi) / g.norm_squared();
            multipliers.push(lam);
            for a in 0..3 {
                stationarity[3 * i + a] += g[a] * lam;
            }
        }
        let inf = |x: &[f64]| x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let objective = crate::linalg::dot(&d, &md);
        let diagnostics = SolveDiagnostics {
            dropped_constraints: self.cs.dropped.len(),
            constraint_residual: self.cs.constraint_residual(&d, v, epsilon)?,
            kkt_residual: inf(&stationarity),
            kkt_scale: self.form.matrix().norm_inf() * inf(&d),
            objective,
            mu: self.mu,
            min_norm_fallback: matches!(self.reduced, Reduced::Dense(_)),
        };
        Ok(CorrespondenceField {
            d,
            v: v.to_vec(),
            epsilon,
            multipliers,
            diagnostics,
        })
    }

    /// Column `k` of `G` is `-d` for `v = e_k`, `eps = 1`.
    pub fn transfer_operator(&self) -> Result<TransferOperator> {
        let dim = self.cs.latent_dim();
        let n3 = 3 * self.cs.mesh.n();
        let cols: Vec<Vec<f64>> = (0..dim)
            .into_par_iter()
            .map(|k| {
                let rhs: Vec<f64> = self.cs.latent.column(k).iter().map(|x| -x).collect();
                self.solve_rhs(&rhs).map(|d| d.into_iter().map(|x| -x).collect())
            })
            .collect::<Result<_>>()?;
        let mut g = DMatrix::zeros(n3, dim);
        for (k, c) in cols.iter().enumerate() {
            g.column_mut(k).copy_from_slice(c);
        }
        Ok(TransferOperator { g })
    }

    /// Row of vertex `i` in the constraint system, if constrained.
    pub fn row_of(&self, i: usize) -> Option<usize> {
        self.row_of[i]
    }
}

/// One-shot `solve_displacement`; `mu = None` selects [`default_mu`].
pub fn solve_displacement(
    form: &DeformQuadForm,
    cs: &ConstraintSystem,
    v: &[f64],
    epsilon: f64,
    mu: Option<f64>,
) -> Result<CorrespondenceField> {
    let mu = mu.unwrap_or_else(|| default_mu(form));
    InducedSolver::new(form, cs, mu)?.solve(v, epsilon)
}

pub fn transfer_operator(form: &DeformQuadForm, cs: &ConstraintSystem, mu: Option<f64>) -> Result<TransferOperator> {
    let mu = mu.unwrap_or_else(|| default_mu(form));
    InducedSolver::new(form, cs, mu)?.transfer_operator()
}

/// Reference solve of the full KKT system with a dense LU factorization.
/// Returns `(d, lambda)`.
pub fn solve_displacement_dense(
    form: &DeformQuadForm,
    cs: &ConstraintSystem,
    v: &[f64],
    epsilon: f64,
    mu: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n3 = form.dim();
    let m = cs.n_rows();
    let mut k = DMatrix::zeros(n3 + m, n3 + m);
    k.view_mut((0, 0), (n3, n3)).copy_from(&form.matrix().shifted(mu).to_dense());
    let c = cs.dense_c();
    k.view_mut((n3, 0), (m, n3)).copy_from(&c);
    k.view_mut((0, n3), (n3, m)).copy_from(&c.transpose());
    let mut rhs = DVector::zeros(n3 + m);
    for (r, x) in cs.rhs(v, epsilon)?.into_iter().enumerate() {
        rhs[n3 + r] = x;
    }
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular KKT matrix".into()))?;
    Ok((sol.rows(0, n3).iter().copied().collect(), sol.rows(n3, m).iter().copied().collect()))
}

/// Linear map `v -> -eps G v` from latent directions to displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferOperator {
    g: DMatrix<f64>,
}

impl TransferOperator {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn apply(&self, v: &[f64], epsilon: f64) -> Result<Vec<f64>> {
        if v.len() != self.g.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.g.ncols(),
                got: v.len(),
            });
        }
        let d = &self.g * DVector::from_column_slice(v);
        Ok(d.iter().map(|x| -epsilon * x).collect())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.g.norm_squared()
    }

    /// `G^T L G`, the Gram form of the transfer operator under `L`.
    pub fn gram(&self, l: &SparseSymMatrix) -> DMatrix<f64> {
        let d = self.g.ncols();
        let lg: Vec<Vec<f64>> = (0..d)
            .map(|k| l.mul_vec(self.g.column(k).as_slice()))
            .collect();
        DMatrix::from_fn(d, d, |a, b| crate::linalg::dot(self.g.column(a).as_slice(), &lg[b]))
    }
}

#[cfg(test)]
mod tests;
