//! Non-rigid ARAP registration of a template to target surfaces, directly or
//! along a latent interpolation path, plus the shape graph used to route
//! correspondences between distant shapes.

mod graph;

use nalgebra::{Matrix3, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::implicit::{latent_path, marching_cubes, ImplicitGenerator, LatentCode, VoxelGrid};
use crate::linalg::{SparseCholesky, TripletBuilder};
use crate::mesh::{graph_laplacian, SurfaceLocator, TriMesh, Vec3};

pub use graph::{
    build_shape_graph, edge_distortion, propagate_correspondences, register_graph_edges, EdgeDistortion,
    EdgeRegistrations, GraphEdge, Propagation, ShapeGraph, DEFAULT_K_ANIMAL, DEFAULT_K_HUMAN,
};

/// Interpolation steps between template and target code.
pub const DEFAULT_PATH_STEPS: usize = 10;

/// Consecutive energy increases tolerated before a registration is aborted.
const DIVERGENCE_PATIENCE: usize = 5;

/// Point-to-point share kept in the point-to-plane term so sliding along the
/// tangent plane stays bounded.
const PLANE_TANGENT_WEIGHT: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataTerm {
    PointToPoint,
    PointToPlane,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegisterConfig {
    /// Weight of the closest-point term against unit ARAP.
    pub w_data: f64,
    pub max_iters: usize,
    /// Relative change of the total energy that counts as converged.
    pub tol: f64,
    pub data_term: DataTerm,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        RegisterConfig {
            w_data: 1.0,
            max_iters: 50,
            tol: 1e-10,
            data_term: DataTerm::PointToPoint,
        }
    }
}

impl RegisterConfig {
    fn validate(&self) -> Result<()> {
        if !(self.w_data > 0.0) || !self.w_data.is_finite() {
            return Err(Error::InvalidArgument(format!("w_data must be > 0, got {}", self.w_data)));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub data_residual: f64,
    pub arap_energy: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Template topology at the registered geometry.
    pub deformed: TriMesh,
    /// Mean squared closest-point distance to the target.
    pub data_residual: f64,
    pub arap_energy: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub history: Vec<IterationRecord>,
}

/// Best-fit rotation mapping rest edges onto deformed edges, with the
/// reflection case folded into the weakest singular direction.
fn fit_rotation(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*cov, true, true);
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested V^T").transpose();
    let mut r = v * u.transpose();
    if r.determinant() < 0.0 {
        let weakest = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(2);
        let mut v = v;
        v.column_mut(weakest).neg_mut();
        r = v * u.transpose();
    }
    r
}

fn fit_rotations(rest: &TriMesh, x: &[Vec3]) -> Vec<Matrix3<f64>> {
    let p = rest.vertices();
    rest.neighbors()
        .par_iter()
        .enumerate()
        .map(|(i, nb)| {
            let mut cov = Matrix3::zeros();
            for &j in nb {
                cov += (p[i] - p[j]) * (x[i] - x[j]).transpose();
            }
            if nb.is_empty() {
                Matrix3::identity()
            } else {
                fit_rotation(&cov)
            }
        })
        .collect()
}

fn arap_with(rest: &TriMesh, x: &[Vec3], rots: &[Matrix3<f64>]) -> f64 {
    let p = rest.vertices();
    rest.neighbors()
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            nb.iter()
                .map(|&j| ((x[i] - x[j]) - rots[i] * (p[i] - p[j])).norm_squared())
                .sum::<f64>()
        })
        .sum()
}

/// ARAP energy of `deformed` against `rest` with optimal per-vertex
/// rotations; zero for rigid motions.
pub fn arap_deformation_energy(rest: &TriMesh, deformed: &[Vec3]) -> Result<f64> {
    if deformed.len() != rest.n() {
        return Err(Error::DimensionMismatch {
            expected: rest.n(),
            got: deformed.len(),
        });
    }
    let rots = fit_rotations(rest, deformed);
    Ok(arap_with(rest, deformed, &rots))
}

fn closest_points(locator: &SurfaceLocator, x: &[Vec3]) -> Vec<(Vec3, Vec3, f64)> {
    x.par_iter()
        .map(|p| {
            let s = locator.closest(p);
            (s.point, s.normal, s.sq_dist)
        })
        .collect()
}

fn bbox_overlap(a: &TriMesh, b: &TriMesh) -> bool {
    let (alo, ahi) = a.bbox();
    let (blo, bhi) = b.bbox();
    (0..3).all(|k| alo[k] <= bhi[k] && blo[k] <= ahi[k])
}

/// Registers `source` onto `target`, using `source` itself as the ARAP rest
/// shape.
pub fn register_arap(source: &TriMesh, target: &TriMesh, config: &RegisterConfig) -> Result<RegistrationResult> {
    register_from(source, source.vertices(), target, config)
}

/// Registration with rest shape `rest` starting from positions `init`.
pub fn register_from(
    rest: &TriMesh,
    init: &[Vec3],
    target: &TriMesh,
    config: &RegisterConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    if init.len() != rest.n() {
        return Err(Error::DimensionMismatch {
            expected: rest.n(),
            got: init.len(),
        });
    }
    if target.n() == 0 {
        return Err(Error::Empty("registration target".into()));
    }
    if !bbox_overlap(rest, target) && !bbox_overlap(&rest.with_vertices(init.to_vec())?, target) {
        return Err(Error::InvalidArgument("source and target bounding boxes do not overlap".into()));
    }
    let n = rest.n();
    let w = config.w_data;
    let locator = SurfaceLocator::new(target);
    let p = rest.vertices();
    let nbrs = rest.neighbors();

    // point-to-point normal matrix is fixed for the whole run
    let lap = graph_laplacian(rest);
    let point_factor = match config.data_term {
        DataTerm::PointToPoint => {
            let m = lap.linear_combination(2.0, &crate::linalg::SparseSymMatrix::identity(n), w)?;
            Some(SparseCholesky::factor(&m)?)
        }
        DataTerm::PointToPlane => None,
    };

    let mut x = init.to_vec();
    let mut history = Vec::new();
    let mut best: Option<(f64, Vec<Vec3>)> = None;
    let mut prev_total = f64::INFINITY;
    let mut increases = 0;
    let mut converged = false;
    let mut diverged = false;
    let mut iterations = 0;
    let scale = rest.bbox_diagonal().max(target.bbox_diagonal()).max(f64::MIN_POSITIVE);

    for _ in 0..config.max_iters {
        let cps = closest_points(&locator, &x);
        let rots = fit_rotations(rest, &x);
        let mut rhs = vec![Vec3::zeros(); n];
        for i in 0..n {
            let mut b = Vec3::zeros();
            for &j in &nbrs[i] {
                b += (rots[i] + rots[j]) * (p[i] - p[j]);
            }
            rhs[i] = b;
        }
        x = match &point_factor {
            Some(factor) => {
                let mut next = vec![Vec3::zeros(); n];
                for a in 0..3 {
                    let b: Vec<f64> = (0..n).map(|i| rhs[i][a] + w * cps[i].0[a]).collect();
                    let sol = factor.solve(&b);
                    for i in 0..n {
                        next[i][a] = sol[i];
                    }
                }
                next
            }
            None => solve_plane_step(rest, &lap, &rhs, &cps, w)?,
        };
        if x.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::Numerical("registration produced non-finite positions".into()));
        }
        iterations += 1;

        let arap = arap_with(rest, &x, &rots);
        let data_sum: f64 = match config.data_term {
            DataTerm::PointToPoint => x.iter().zip(&cps).map(|(xi, c)| (xi - c.0).norm_squared()).sum(),
            DataTerm::PointToPlane => x
                .iter()
                .zip(&cps)
                .map(|(xi, c)| {
                    let r = xi - c.0;
                    r.dot(&c.1).powi(2) + PLANE_TANGENT_WEIGHT * r.norm_squared()
                })
                .sum(),
        };
        let total = arap + w * data_sum;
        history.push(IterationRecord {
            data_residual: data_sum / n as f64,
            arap_energy: arap,
            total,
        });
        if best.as_ref().is_none_or(|(e, _)| total < *e) {
            best = Some((total, x.clone()));
        }
        if total > prev_total * (1.0 + 1e-12) {
            increases += 1;
            if increases >= DIVERGENCE_PATIENCE {
                log::warn!("registration energy rose for {DIVERGENCE_PATIENCE} iterations; keeping best result");
                diverged = true;
                break;
            }
        } else {
            increases = 0;
        }
        let change = (prev_total - total).abs();
        let stalled = prev_total.is_finite() && change <= config.tol * prev_total.max(total);
        if stalled || total <= 1e-28 * scale * scale * n as f64 {
            converged = true;
            break;
        }
        prev_total = total;
    }

    if diverged {
        if let Some((_, bx)) = best {
            x = bx;
        }
    }
    let final_cps = closest_points(&locator, &x);
    let data_residual = final_cps.iter().map(|c| c.2).sum::<f64>() / n as f64;
    let arap_energy = arap_deformation_energy(rest, &x)?;
    Ok(RegistrationResult {
        deformed: rest.with_vertices(x)?,
        data_residual,
        arap_energy,
        iterations,
        converged,
        diverged,
        history,
    })
}

fn solve_plane_step(
    rest: &TriMesh,
    lap: &crate::linalg::SparseSymMatrix,
    rhs: &[Vec3],
    cps: &[(Vec3, Vec3, f64)],
    w: f64,
) -> Result<Vec<Vec3>> {
    let n = rest.n();
    let mut t = TripletBuilder::with_capacity(3 * n, 3 * lap.nnz() + 9 * n);
    for (r, c, v) in lap.entries() {
        for a in 0..3 {
            t.add(3 * r + a, 3 * c + a, 2.0 * v);
        }
    }
    let mut b = vec![0.0; 3 * n];
    for i in 0..n {
        let (c, nrm, _) = cps[i];
        let block = nrm * nrm.transpose() + Matrix3::identity() * PLANE_TANGENT_WEIGHT;
        let target = block * c;
        for a in 0..3 {
            for bb in 0..3 {
                t.add(3 * i + a, 3 * i + bb, w * block[(a, bb)]);
            }
            b[3 * i + a] = rhs[i][a] + w * target[a];
        }
    }
    let m = t.build()?;
    let sol = SparseCholesky::factor(&m)?.solve(&b);
    Ok(crate::mesh::unflatten(&sol))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathStep {
    pub code: LatentCode,
    pub data_residual: f64,
    pub iterations: usize,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct PathRegistration {
    pub result: RegistrationResult,
    /// One record per intermediate code, then the final target.
    pub steps: Vec<PathStep>,
}

impl PathRegistration {
    pub fn diverged(&self) -> bool {
        self.steps.iter().any(|s| s.diverged)
    }

    pub fn worst_step_residual(&self) -> f64 {
        self.steps.iter().map(|s| s.data_residual).fold(0.0, f64::max)
    }
}

/// Interpolation-guided registration: the template follows the level sets
/// at `steps` interior codes between `z_temp` and `z_target`, each step
/// warm-started from and using the previous result as rest shape, then
/// lands on the `z_target` level set.
pub fn register_along_path(
    template: &TriMesh,
    gen: &ImplicitGenerator,
    z_temp: &LatentCode,
    z_target: &LatentCode,
    steps: usize,
    grid: &VoxelGrid,
    config: &RegisterConfig,
) -> Result<PathRegistration> {
    register_along_path_to(template, gen, z_temp, z_target, steps, grid, None, config)
}

/// As [`register_along_path`], with the last registration against
/// `final_target` (such as the input scan) instead of the extracted level set.
#[allow(clippy::too_many_arguments)]
pub fn register_along_path_to(
    template: &TriMesh,
    gen: &ImplicitGenerator,
    z_temp: &LatentCode,
    z_target: &LatentCode,
    steps: usize,
    grid: &VoxelGrid,
    final_target: Option<&TriMesh>,
    config: &RegisterConfig,
) -> Result<PathRegistration> {
    if z_temp.dim() != gen.latent_dim() || z_target.dim() != gen.latent_dim() {
        return Err(Error::DimensionMismatch {
            expected: gen.latent_dim(),
            got: if z_temp.dim() != gen.latent_dim() { z_temp.dim() } else { z_target.dim() },
        });
    }
    if z_temp == z_target && final_target.is_none() {
        return Ok(PathRegistration {
            result: RegistrationResult {
                deformed: template.clone(),
                data_residual: 0.0,
                arap_energy: 0.0,
                iterations: 0,
                converged: true,
                diverged: false,
                history: Vec::new(),
            },
            steps: Vec::new(),
        });
    }
    let mut codes = if z_temp == z_target { Vec::new() } else { latent_path(z_temp, z_target, steps)? };
    codes.push(z_target.clone());
    let last = codes.len() - 1;
    let mut current = template.clone();
    let mut records = Vec::with_capacity(codes.len());
    let mut result = None;
    for (j, z) in codes.iter().enumerate() {
        let label = format!("path step {} of {}", j + 1, codes.len());
        let extracted;
        let target = match (j == last, final_target) {
            (true, Some(t)) => t,
            _ => {
                extracted = marching_cubes(gen, z, grid).map_err(|e| Error::stage(&label, e))?.mesh;
                &extracted
            }
        };
        let r = register_from(&current, current.vertices(), target, config).map_err(|e| Error::stage(&label, e))?;
        if r.diverged {
            log::warn!("{label} diverged");
        }
        records.push(PathStep {
            code: z.clone(),
            data_residual: r.data_residual,
            iterations: r.iterations,
            diverged: r.diverged,
        });
        current = r.deformed.clone();
        result = Some(r);
    }
    let mut result = result.expect("at least one step");
    // report deformation relative to the original template
    result.arap_energy = arap_deformation_energy(template, result.deformed.vertices())?;
    Ok(PathRegistration { result, steps: records })
}
