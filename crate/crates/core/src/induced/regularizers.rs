//! Geometric and cycle-consistency regularizers built on induced
//! correspondences, plus single-step advection of a mesh along the latent
//! space.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_constraints, default_mu, InducedSolver, SolveDiagnostics};
use crate::energy::{build_combined, DeformQuadForm, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::implicit::{marching_cubes, ImplicitGenerator, LatentCode, VoxelGrid};
use crate::mesh::{simplify, TriMesh, Vec3};

/// Latent dimensions up to this size use the exact trace by default.
pub const EXACT_TRACE_MAX_DIM: usize = 64;

pub const DEFAULT_PROBES: usize = 64;

pub const DEFAULT_EPS_CYC: f64 = 1e-2;

/// Volume of the unit ball in `R^d`.
pub fn ball_volume(d: usize) -> f64 {
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => ball_volume(d - 2) * 2.0 * std::f64::consts::PI / d as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TraceMode {
    Exact,
    /// Rademacher probes, one constrained solve each.
    Hutchinson { probes: usize, seed: u64 },
}

impl TraceMode {
    pub fn auto(latent_dim: usize) -> Self {
        if latent_dim <= EXACT_TRACE_MAX_DIM {
            TraceMode::Exact
        } else {
            TraceMode::Hutchinson {
                probes: DEFAULT_PROBES,
                seed: 0,
            }
        }
    }
}

impl FromStr for TraceMode {
    type Err = Error;

    /// `exact` or `hutchinson:<m>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "exact" {
            return Ok(TraceMode::Exact);
        }
        if let Some(m) = s.strip_prefix("hutchinson:") {
            let probes: usize = m
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad probe count in trace mode {s:?}")))?;
            if probes == 0 {
                return Err(Error::InvalidArgument("hutchinson needs at least one probe".into()));
            }
            return Ok(TraceMode::Hutchinson { probes, seed: 0 });
        }
        Err(Error::InvalidArgument(format!(
            "unknown trace mode {s:?} (expected exact or hutchinson:<m>)"
        )))
    }
}

/// Trace of `E = G^T L G`, the energy of the induced field per unit latent
/// direction.
pub fn trace_e(solver: &InducedSolver, mode: TraceMode) -> Result<f64> {
    let cs = solver.constraints();
    let l = solver.form().matrix();
    let dim = cs.latent_dim();
    let energy = |v: &[f64]| -> Result<f64> {
        let rhs = cs.rhs(v, 1.0)?;
        let d = solver.solve_rhs_limit(&rhs)?;
        Ok(l.quad_form(&d).max(0.0))
    };
    match mode {
        TraceMode::Exact => {
            let parts: Vec<f64> = (0..dim)
                .into_par_iter()
                .map(|k| energy(LatentCode::basis(dim, k).as_slice()))
                .collect::<Result<_>>()?;
            Ok(parts.iter().sum())
        }
        TraceMode::Hutchinson { probes, seed } => {
            if probes == 0 {
                return Err(Error::InvalidArgument("hutchinson needs at least one probe".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vs: Vec<Vec<f64>> = (0..probes)
                .map(|_| (0..dim).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect())
                .collect();
            let parts: Vec<f64> = vs.par_iter().map(|v| energy(v)).collect::<Result<_>>()?;
            Ok(parts.iter().sum::<f64>() / probes as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GeoOptions {
    pub mu: Option<f64>,
    pub trace: Option<TraceMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoReport {
    /// `Vol(B_d) / d * Tr(E)`.
    pub value: f64,
    pub trace: f64,
    pub mode: TraceMode,
    pub mu: f64,
}

pub fn r_geo(form: &DeformQuadForm, cs: &super::ConstraintSystem, opts: &GeoOptions) -> Result<GeoReport> {
    let mu = opts.mu.unwrap_or_else(|| default_mu(form));
    let solver = InducedSolver::new(form, cs, mu)?;
    let d = cs.latent_dim();
    if d == 0 {
        return Err(Error::InvalidArgument("latent dimension is zero".into()));
    }
    let mode = opts.trace.unwrap_or_else(|| TraceMode::auto(d));
    let trace = trace_e(&solver, mode)?;
    Ok(GeoReport {
        value: ball_volume(d) / d as f64 * trace,
        trace,
        mode,
        mu,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleOptions {
    pub eps_cyc: f64,
    /// Correspondence step dividing the squared difference.
    pub epsilon: f64,
    pub alpha: f64,
    pub mu: Option<f64>,
}

impl Default for CycleOptions {
    fn default() -> Self {
        CycleOptions {
            eps_cyc: DEFAULT_EPS_CYC,
            epsilon: super::DEFAULT_EPSILON,
            alpha: DEFAULT_ALPHA,
            mu: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    /// `|G(z + eps_cyc e_i) - G(z)|_F^2 / epsilon`.
    pub residual: f64,
    /// `residual / (3n)`.
    pub residual_per_coordinate: f64,
    /// `|G(z)|_F^2`.
    pub g_norm_sq: f64,
    pub basis_index: usize,
    pub mu: f64,
}

fn displaced(mesh: &TriMesh, d: &[f64]) -> Result<TriMesh> {
    let v = mesh
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, p)| p + Vec3::new(d[3 * i], d[3 * i + 1], d[3 * i + 2]))
        .collect();
    mesh.with_vertices(v)
}

/// Finite-difference cycle residual along basis direction `i`. Both transfer
/// operators live on the vertices of `mesh`: the perturbed one is evaluated on
/// `mesh` advected by `d^{e_i}` with step `eps_cyc`.
pub fn cycle_residual(
    gen: &ImplicitGenerator,
    mesh: &TriMesh,
    z: &LatentCode,
    i: usize,
    opts: &CycleOptions,
) -> Result<CycleReport> {
    let dim = gen.latent_dim();
    if i >= dim {
        return Err(Error::IndexOutOfRange {
            index: i as i64,
            size: dim,
        });
    }
    if !(opts.eps_cyc > 0.0) || !(opts.epsilon > 0.0) {
        return Err(Error::InvalidArgument("eps_cyc and epsilon must be > 0".into()));
    }
    let form0 = build_combined(mesh, opts.alpha)?;
    let mu = opts.mu.unwrap_or_else(|| default_mu(&form0));
    let cs0 = build_constraints(gen, mesh, z)?;
    let g0 = InducedSolver::new(&form0, &cs0, mu)?.transfer_operator()?;
    let ei = LatentCode::basis(dim, i);
    let step = g0.apply(ei.as_slice(), opts.eps_cyc)?;
    let mesh1 = displaced(mesh, &step)?;
    let z1 = z.offset(opts.eps_cyc, ei.as_slice())?;
    let form1 = build_combined(&mesh1, opts.alpha)?;
    let cs1 = build_constraints(gen, &mesh1, &z1).map_err(|e| {
        Error::Numerical(format!(
            "perturbed constraints at z + {} e_{i} failed: {e}",
            opts.eps_cyc
        ))
    })?;
    let g1 = InducedSolver::new(&form1, &cs1, mu)?.transfer_operator()?;
    let diff = (g1.matrix() - g0.matrix()).norm_squared();
    let residual = diff / opts.epsilon;
    Ok(CycleReport {
        residual,
        residual_per_coordinate: residual / (3 * mesh.n()) as f64,
        g_norm_sq: g0.frobenius_sq(),
        basis_index: i,
        mu,
    })
}

/// Extracts and simplifies the `z` level set, then evaluates
/// [`cycle_residual`] on it.
pub fn cycle_residual_on_grid(
    gen: &ImplicitGenerator,
    z: &LatentCode,
    i: usize,
    grid: &VoxelGrid,
    simplify_target: usize,
    opts: &CycleOptions,
) -> Result<CycleReport> {
    let ex = marching_cubes(gen, z, grid)?;
    let (mesh, _) = simplify(&ex.mesh, simplify_target)?;
    cycle_residual(gen, &mesh, z, i, opts)
}

/// `d^v(z) + d^{v' - v}(z + eps v) - d^{v'}(z)` with the middle term solved on
/// the mesh advected by `d^v`.
#[allow(clippy::too_many_arguments)]
pub fn three_cycle_residual(
    gen: &ImplicitGenerator,
    mesh: &TriMesh,
    z: &LatentCode,
    v: &[f64],
    v2: &[f64],
    epsilon: f64,
    alpha: f64,
    mu: Option<f64>,
) -> Result<Vec<f64>> {
    let form0 = build_combined(mesh, alpha)?;
    let mu = mu.unwrap_or_else(|| default_mu(&form0));
    let cs0 = build_constraints(gen, mesh, z)?;
    let s0 = InducedSolver::new(&form0, &cs0, mu)?;
    let dv = s0.solve(v, epsilon)?.d;
    let dv2 = s0.solve(v2, epsilon)?.d;
    let mesh1 = displaced(mesh, &dv)?;
    let z1 = z.offset(epsilon, v)?;
    let form1 = build_combined(&mesh1, alpha)?;
    let cs1 = build_constraints(gen, &mesh1, &z1)?;
    let w: Vec<f64> = v2.iter().zip(v).map(|(a, b)| a - b).collect();
    let dw = InducedSolver::new(&form1, &cs1, mu)?.solve(&w, epsilon)?.d;
    Ok(dv.iter().zip(&dw).zip(&dv2).map(|((a, b), c)| a + b - c).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvectOptions {
    pub alpha: f64,
    pub mu: Option<f64>,
    /// Newton-project displaced vertices onto the new level set.
    pub project: bool,
}

impl Default for AdvectOptions {
    fn default() -> Self {
        AdvectOptions {
            alpha: DEFAULT_ALPHA,
            mu: None,
            project: false,
        }
    }
}

const PROJECTION_STEPS: usize = 3;

/// Moves `mesh` from the `z` level set to the `z + eps v` level set along
/// the induced field.
pub fn advect(
    gen: &ImplicitGenerator,
    mesh: &TriMesh,
    z: &LatentCode,
    v: &[f64],
    epsilon: f64,
    opts: &AdvectOptions,
) -> Result<(TriMesh, LatentCode, SolveDiagnostics)> {
    let form = build_combined(mesh, opts.alpha)?;
    let mu = opts.mu.unwrap_or_else(|| default_mu(&form));
    let cs = build_constraints(gen, mesh, z)?;
    let field = InducedSolver::new(&form, &cs, mu)?.solve(v, epsilon)?;
    let z1 = z.offset(epsilon, v)?;
    let mut moved = displaced(mesh, &field.d)?;
    if opts.project {
        let zs = z1.as_slice();
        let max_step = 0.5 * epsilon;
        let pts: Vec<Vec3> = moved
            .vertices()
            .par_iter()
            .map(|p| {
                let mut x = *p;
                for _ in 0..PROJECTION_STEPS {
                    let s = gen.sample_unchecked(&x, zs);
                    let g2 = s.grad_x.norm_squared();
                    if s.value == 0.0 || g2 < super::MIN_GRADIENT_NORM * super::MIN_GRADIENT_NORM {
                        break;
                    }
                    let mut step = -s.grad_x * (s.value / g2);
                    let len = step.norm();
                    if len > max_step {
                        step *= max_step / len;
                    }
                    x += step;
                }
                x
            })
            .collect();
        moved = moved.with_vertices(pts)?;
    }
    Ok((moved, z1, field.diagnostics))
}
