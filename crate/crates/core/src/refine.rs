//! Refinement of per-shape template meshes under Chamfer alignment plus an
//! ACAP prior between neighboring shapes.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{build_acap, DeformQuadForm};
use crate::error::{Error, Result};
use crate::implicit::LatentCode;
use crate::linalg::SparseSymMatrix;
use crate::mesh::{flatten, KdTree, TriMesh, Vec3};
use crate::registration::ShapeGraph;

pub const DEFAULT_LAMBDA_D: f64 = 1e-3;
pub const DEFAULT_REBUILD_EVERY: usize = 10;

const MAX_HALVINGS: usize = 30;
const MONOTONE_SLACK: f64 = 1e-9;

/// Lookup-table mesh generator: one vertex array per input code over a
/// shared face list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteGenerator {
    pub faces: Vec<[usize; 3]>,
    pub vertex_sets: Vec<Vec<Vec3>>,
    pub codes: Vec<LatentCode>,
    /// Neighboring shape pairs `(i, j)` the prior is evaluated on.
    pub edges: Vec<(usize, usize)>,
}

/// Generator reproducing the registered templates exactly.
pub fn init_generator(templates: &[TriMesh], codes: &[LatentCode], graph: &ShapeGraph) -> Result<DiscreteGenerator> {
    if templates.is_empty() {
        return Err(Error::Empty("template set".into()));
    }
    if templates.len() != codes.len() || graph.n() != codes.len() {
        return Err(Error::DimensionMismatch {
            expected: codes.len(),
            got: if templates.len() != codes.len() { templates.len() } else { graph.n() },
        });
    }
    for (i, t) in templates.iter().enumerate() {
        if !t.same_topology(&templates[0]) {
            return Err(Error::InvalidMesh(format!("template {i} does not share the topology of template 0")));
        }
    }
    Ok(DiscreteGenerator {
        faces: templates[0].faces().to_vec(),
        vertex_sets: templates.iter().map(|t| t.vertices().to_vec()).collect(),
        codes: codes.to_vec(),
        edges: graph.edges.iter().map(|e| (e.i, e.j)).collect(),
    })
}

impl DiscreteGenerator {
    pub fn n_shapes(&self) -> usize {
        self.vertex_sets.len()
    }

    pub fn mesh(&self, i: usize) -> Result<TriMesh> {
        TriMesh::new(self.vertex_sets[i].clone(), self.faces.clone())
    }

    pub fn meshes(&self) -> Result<Vec<TriMesh>> {
        (0..self.n_shapes()).map(|i| self.mesh(i)).collect()
    }
}

fn one_sided(from: &[Vec3], tree: &KdTree) -> (f64, Vec<usize>) {
    let hits: Vec<(usize, f64)> = from.par_iter().map(|p| tree.nearest(p).expect("non-empty")).collect();
    let sum: f64 = hits.iter().map(|h| h.1).sum();
    (sum / from.len() as f64, hits.into_iter().map(|h| h.0).collect())
}

/// Symmetric Chamfer distance with squared point distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("chamfer point set".into()));
    }
    let (ab, _) = one_sided(a, &KdTree::new(b));
    let (ba, _) = one_sided(b, &KdTree::new(a));
    Ok(ab + ba)
}

/// Quadratic-time Chamfer distance.
pub fn chamfer_brute_force(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("chamfer point set".into()));
    }
    let side = |from: &[Vec3], to: &[Vec3]| {
        from.iter()
            .map(|p| to.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(side(a, b) + side(b, a))
}

fn edge_term(form: &SparseSymMatrix, from: &[Vec3], to: &[Vec3]) -> (f64, Vec<f64>) {
    let delta: Vec<f64> = flatten(to).iter().zip(flatten(from)).map(|(b, a)| b - a).collect();
    let ld = form.mul_vec(&delta);
    (crate::linalg::dot(&delta, &ld).max(0.0), ld)
}

fn check_edges(gen: &DiscreteGenerator) -> Result<()> {
    for &(i, j) in &gen.edges {
        if i >= gen.n_shapes() || j >= gen.n_shapes() {
            return Err(Error::IndexOutOfRange {
                index: i.max(j) as i64,
                size: gen.n_shapes(),
            });
        }
    }
    Ok(())
}

fn build_forms(gen: &DiscreteGenerator) -> Result<Vec<DeformQuadForm>> {
    (0..gen.n_shapes())
        .into_par_iter()
        .map(|i| gen.mesh(i).map(|m| build_acap(&m)))
        .collect()
}

/// Mean ACAP energy of the differences between neighboring shapes, each
/// measured on the ACAP form of the edge's first shape.
pub fn acap_deformation_reg(gen: &DiscreteGenerator) -> Result<f64> {
    check_edges(gen)?;
    if gen.edges.is_empty() {
        return Ok(0.0);
    }
    let forms = build_forms(gen)?;
    let total: f64 = gen
        .edges
        .iter()
        .map(|&(i, j)| edge_term(forms[i].matrix(), &gen.vertex_sets[i], &gen.vertex_sets[j]).0)
        .sum();
    Ok(total / gen.edges.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineLoss {
    /// Mean over shapes of the Chamfer distance to the shape's samples.
    pub chamfer: f64,
    pub acap_reg: f64,
    pub lambda_d: f64,
    pub total: f64,
}

impl RefineLoss {
    fn new(chamfer: f64, acap_reg: f64, lambda_d: f64) -> Self {
        RefineLoss {
            chamfer,
            acap_reg,
            lambda_d,
            total: chamfer + lambda_d * acap_reg,
        }
    }
}

/// Refinement objective with the ACAP forms held at the meshes they were
/// built from.
pub struct FrozenObjective<'a> {
    edges: &'a [(usize, usize)],
    target_trees: Vec<KdTree>,
    targets: &'a [Vec<Vec3>],
    forms: Vec<DeformQuadForm>,
    lambda_d: f64,
}

impl<'a> FrozenObjective<'a> {
    pub fn new(gen: &'a DiscreteGenerator, targets: &'a [Vec<Vec3>], lambda_d: f64) -> Result<Self> {
        check_edges(gen)?;
        if targets.len() != gen.n_shapes() {
            return Err(Error::DimensionMismatch {
                expected: gen.n_shapes(),
                got: targets.len(),
            });
        }
        if let Some(i) = targets.iter().position(|t| t.is_empty()) {
            return Err(Error::Empty(format!("target samples of shape {i}")));
        }
        if !(lambda_d >= 0.0) || !lambda_d.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda_d must be >= 0, got {lambda_d}")));
        }
        Ok(FrozenObjective {
            edges: &gen.edges,
            target_trees: targets.par_iter().map(|t| KdTree::new(t)).collect(),
            targets,
            forms: if lambda_d > 0.0 { build_forms(gen)? } else { Vec::new() },
            lambda_d,
        })
    }

    pub fn evaluate(&self, sets: &[Vec<Vec3>]) -> RefineLoss {
        self.run(sets, false).0
    }

    /// Loss and its gradient with respect to every vertex position.
    pub fn gradient(&self, sets: &[Vec<Vec3>]) -> (RefineLoss, Vec<Vec<Vec3>>) {
        self.run(sets, true)
    }

    fn run(&self, sets: &[Vec<Vec3>], want_grad: bool) -> (RefineLoss, Vec<Vec<Vec3>>) {
        let n_shapes = sets.len() as f64;
        let per_shape: Vec<(f64, Vec<Vec3>)> = sets
            .par_iter()
            .enumerate()
            .map(|(s, a)| {
                let b = &self.targets[s];
                let (ab, nn_b) = one_sided(a, &self.target_trees[s]);
                let (ba, nn_a) = one_sided(b, &KdTree::new(a));
                let mut g = vec![Vec3::zeros(); if want_grad { a.len() } else { 0 }];
                if want_grad {
                    let (wa, wb) = (2.0 / (a.len() as f64 * n_shapes), 2.0 / (b.len() as f64 * n_shapes));
                    for (k, p) in a.iter().enumerate() {
                        g[k] += (p - b[nn_b[k]]) * wa;
                    }
                    for (q, &k) in b.iter().zip(&nn_a) {
                        g[k] += (a[k] - q) * wb;
                    }
                }
                ((ab + ba) / n_shapes, g)
            })
            .collect();
        let chamfer: f64 = per_shape.iter().map(|p| p.0).sum();
        let mut grads: Vec<Vec<Vec3>> = per_shape.into_iter().map(|p| p.1).collect();

        let mut reg = 0.0;
        if self.lambda_d > 0.0 && !self.edges.is_empty() {
            let m = self.edges.len() as f64;
            let terms: Vec<(f64, Vec<f64>)> = self
                .edges
                .par_iter()
                .map(|&(i, j)| edge_term(self.forms[i].matrix(), &sets[i], &sets[j]))
                .collect();
            for (&(i, j), (e, ld)) in self.edges.iter().zip(&terms) {
                reg += e / m;
                if want_grad {
                    let c = 2.0 * self.lambda_d / m;
                    for k in 0..sets[i].len() {
                        let v = Vec3::new(ld[3 * k], ld[3 * k + 1], ld[3 * k + 2]) * c;
                        grads[j][k] += v;
                        grads[i][k] -= v;
                    }
                }
            }
        }
        (RefineLoss::new(chamfer, reg, self.lambda_d), grads)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub lambda_d: f64,
    pub steps: usize,
    /// Step length in per-vertex units: 0.25 moves an isolated vertex
    /// halfway to its closest sample.
    pub step_size: f64,
    pub rebuild_every: usize,
    /// Where to write the generator state if a gradient turns non-finite.
    pub dump_on_failure: Option<PathBuf>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            lambda_d: DEFAULT_LAMBDA_D,
            steps: 200,
            step_size: 0.2,
            rebuild_every: DEFAULT_REBUILD_EVERY,
            dump_on_failure: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: RefineLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineTrace {
    /// Loss after every accepted step, under the forms frozen at that time.
    pub steps: Vec<TraceRow>,
    /// Loss with freshly built forms at the start and after each epoch.
    pub epochs: Vec<RefineLoss>,
    pub final_step_size: f64,
}

impl RefineTrace {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("step,chamfer,acap_reg,total\n");
        for r in &self.steps {
            out.push_str(&format!("{},{:e},{:e},{:e}\n", r.step, r.loss.chamfer, r.loss.acap_reg, r.loss.total));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

fn dump_state(path: &Option<PathBuf>, gen: &DiscreteGenerator) {
    if let Some(p) = path {
        match serde_json::to_string(gen) {
            Ok(s) => {
                if let Err(e) = std::fs::write(p, s) {
                    log::error!("could not write refine state to {}: {e}", p.display());
                }
            }
            Err(e) => log::error!("could not serialize refine state: {e}"),
        }
    }
}

/// Gradient descent on all vertex sets with closest-point Chamfer pairing
/// refreshed every step and ACAP forms rebuilt every `rebuild_every` steps.
/// Steps and whole epochs that would raise the loss are retried at half the
/// step size.
pub fn refine(
    gen: &DiscreteGenerator,
    targets: &[Vec<Vec3>],
    config: &RefineConfig,
) -> Result<(DiscreteGenerator, RefineTrace)> {
    if !(config.step_size > 0.0) {
        return Err(Error::InvalidArgument(format!("step_size must be > 0, got {}", config.step_size)));
    }
    if config.rebuild_every == 0 {
        return Err(Error::InvalidArgument("rebuild_every must be >= 1".into()));
    }
    let mut current = gen.clone();
    let mut eta = config.step_size;
    let mut trace = RefineTrace {
        steps: Vec::new(),
        epochs: Vec::new(),
        final_step_size: eta,
    };
    let mut epoch_loss = FrozenObjective::new(&current, targets, config.lambda_d)?.evaluate(&current.vertex_sets);
    trace.epochs.push(epoch_loss);
    let mut done = 0usize;
    let mut stalled = false;
    while done < config.steps && !stalled {
        let epoch_len = config.rebuild_every.min(config.steps - done);
        let start = current.clone();
        let rows_before = trace.steps.len();
        let mut attempt = 0;
        loop {
            let objective = FrozenObjective::new(&start, targets, config.lambda_d)?;
            let mut sets = start.vertex_sets.clone();
            let mut loss = objective.evaluate(&sets);
            trace.steps.truncate(rows_before);
            let mut epoch_stalled = false;
            for k in 0..epoch_len {
                let (_, grad) = objective.gradient(&sets);
                if grad.iter().flatten().any(|g| !g.iter().all(|c| c.is_finite())) {
                    dump_state(&config.dump_on_failure, &current);
                    return Err(Error::Numerical(format!("non-finite refine gradient at step {}", done + k)));
                }
                let mut accepted = None;
                let mut step = eta;
                for _ in 0..MAX_HALVINGS {
                    let trial: Vec<Vec<Vec3>> = sets
                        .iter()
                        .zip(&grad)
                        .map(|(s, g)| {
                            let scale = step * (s.len() * sets.len()) as f64;
                            s.iter().zip(g).map(|(p, d)| p - d * scale).collect()
                        })
                        .collect();
                    let l = objective.evaluate(&trial);
                    if l.total <= loss.total {
                        accepted = Some((trial, l));
                        break;
                    }
                    step *= 0.5;
                }
                match accepted {
                    Some((trial, l)) => {
                        sets = trial;
                        loss = l;
                        eta = (2.0 * step).min(config.step_size);
                        trace.steps.push(TraceRow {
                            step: done + k + 1,
                            loss: l,
                        });
                    }
                    None => {
                        epoch_stalled = true;
                        break;
                    }
                }
            }
            let candidate = DiscreteGenerator {
                vertex_sets: sets,
                ..start.clone()
            };
            let fresh = FrozenObjective::new(&candidate, targets, config.lambda_d)?.evaluate(&candidate.vertex_sets);
            if fresh.total <= epoch_loss.total + MONOTONE_SLACK {
                current = candidate;
                epoch_loss = fresh;
                trace.epochs.push(fresh);
                stalled = epoch_stalled;
                break;
            }
            attempt += 1;
            eta *= 0.5;
            if attempt >= MAX_HALVINGS {
                log::warn!("refinement epoch could not lower the loss; stopping");
                trace.steps.truncate(rows_before);
                stalled = true;
                break;
            }
        }
        done += epoch_len;
    }
    trace.final_step_size = eta;
    Ok((current, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;
    use crate::registration::build_shape_graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    fn single(mesh: &TriMesh) -> DiscreteGenerator {
        DiscreteGenerator {
            faces: mesh.faces().to_vec(),
            vertex_sets: vec![mesh.vertices().to_vec()],
            codes: vec![LatentCode::zeros(1)],
            edges: vec![],
        }
    }

    fn pair(a: &TriMesh, b: Vec<Vec3>) -> DiscreteGenerator {
        DiscreteGenerator {
            faces: a.faces().to_vec(),
            vertex_sets: vec![a.vertices().to_vec(), b],
            codes: vec![LatentCode::zeros(1), LatentCode::new(vec![1.0]).unwrap()],
            edges: vec![(0, 1)],
        }
    }

    #[test]
    fn chamfer_hand_values() {
        let a = vec![Vec3::zeros()];
        let b = vec![Vec3::new(1.0, 0.0, 0.0)];
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        let pts = random_points(&mut ChaCha8Rng::seed_from_u64(0), 50);
        assert_eq!(chamfer(&pts, &pts).unwrap(), 0.0);
        assert!(chamfer(&[], &pts).is_err());
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_points(&mut rng, 500);
        let b = random_points(&mut rng, 500);
        let fast = chamfer(&a, &b).unwrap();
        let slow = chamfer_brute_force(&a, &b).unwrap();
        assert!((fast - slow).abs() <= 1e-10 * slow.max(1.0));
    }

    #[test]
    fn init_reproduces_templates() {
        let m = shapes::icosphere(1, 1.0);
        let t: Vec<TriMesh> = (0..3).map(|k| m.transformed(|p| p * (1.0 + k as f64)).unwrap()).collect();
        let codes: Vec<LatentCode> = (0..3).map(|k| LatentCode::new(vec![k as f64]).unwrap()).collect();
        let graph = build_shape_graph(&codes, 1, 0).unwrap();
        let g = init_generator(&t, &codes, &graph).unwrap();
        for (k, tk) in t.iter().enumerate() {
            assert_eq!(g.vertex_sets[k], tk.vertices());
            assert_eq!(&g.mesh(k).unwrap(), tk);
        }
        let other = shapes::icosphere(2, 1.0);
        assert!(init_generator(&[m, other.clone(), other], &codes, &graph).is_err());
    }

    #[test]
    fn regularizer_null_space_and_oracle() {
        let m = shapes::random_blob(&mut ChaCha8Rng::seed_from_u64(3), 1);
        assert_eq!(acap_deformation_reg(&pair(&m, m.vertices().to_vec())).unwrap(), 0.0);
        let c = Vec3::new(0.1, 0.2, -0.3);
        let scaled: Vec<Vec3> = m.vertices().iter().map(|p| c + (p - c) * 1.3).collect();
        assert!(acap_deformation_reg(&pair(&m, scaled)).unwrap() <= 1e-10);

        let mut moved = m.vertices().to_vec();
        moved[5] += Vec3::new(0.02, -0.01, 0.03);
        let d: Vec<f64> = flatten(&moved).iter().zip(m.flat_positions()).map(|(a, b)| a - b).collect();
        let oracle = crate::energy::acap_energy_oracle(&m, &d).unwrap();
        let reg = acap_deformation_reg(&pair(&m, moved)).unwrap();
        assert!((reg - oracle).abs() <= 1e-8 * oracle);
    }

    #[test]
    fn regularizer_under_similarity() {
        use nalgebra::{Rotation3, Unit};
        let m = shapes::random_blob(&mut ChaCha8Rng::seed_from_u64(8), 1);
        let other: Vec<Vec3> = m.vertices().iter().map(|p| p + Vec3::new(p.y * 0.1, 0.0, p.x * p.x * 0.2)).collect();
        let base = acap_deformation_reg(&pair(&m, other.clone())).unwrap();
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::new(1.0, 2.0, 0.5)), 0.7);
        let t = Vec3::new(0.4, -1.0, 2.0);
        let s = 1.7;
        let apply = |p: &Vec3| r * p * s + t;
        let m2 = m.transformed(apply).unwrap();
        let o2: Vec<Vec3> = other.iter().map(apply).collect();
        let moved = acap_deformation_reg(&pair(&m2, o2)).unwrap();
        // the form is scale free, the squared differences pick up s^2
        assert!((moved - s * s * base).abs() <= 1e-8 * moved);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = shapes::random_blob(&mut rng, 1);
        let other: Vec<Vec3> = m.vertices().iter().map(|p| p * 1.1 + Vec3::new(0.0, 0.05, 0.0)).collect();
        let gen = pair(&m, other);
        let targets = vec![random_points(&mut rng, 120), random_points(&mut rng, 130)];
        let obj = FrozenObjective::new(&gen, &targets, 0.5).unwrap();
        let (_, grad) = obj.gradient(&gen.vertex_sets);
        let h = 1e-6;
        for (s, k, a) in [(0, 3, 0), (1, 7, 2), (0, 11, 1), (1, 0, 0)] {
            let mut plus = gen.vertex_sets.clone();
            let mut minus = gen.vertex_sets.clone();
            plus[s][k][a] += h;
            minus[s][k][a] -= h;
            let fd = (obj.evaluate(&plus).total - obj.evaluate(&minus).total) / (2.0 * h);
            let an = grad[s][k][a];
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-8), "({s},{k},{a}): {fd} vs {an}");
        }
    }

    #[test]
    fn zero_gradient_at_targets() {
        let m = shapes::icosphere(2, 1.0);
        let gen = single(&m);
        let targets = vec![m.vertices().to_vec()];
        let cfg = RefineConfig {
            lambda_d: 0.0,
            steps: 5,
            ..RefineConfig::default()
        };
        let (out, _) = refine(&gen, &targets, &cfg).unwrap();
        assert_eq!(out, gen);
    }

    #[test]
    fn fits_deformed_copy() {
        let m = shapes::icosphere(2, 1.0);
        let gen = single(&m);
        let targets = vec![m.vertices().iter().map(|p| Vec3::new(p.x * 1.1, p.y, p.z * 0.95 + 0.02)).collect()];
        let cfg = RefineConfig {
            lambda_d: 0.0,
            steps: 300,
            ..RefineConfig::default()
        };
        let (out, trace) = refine(&gen, &targets, &cfg).unwrap();
        let c = chamfer(&out.vertex_sets[0], &targets[0]).unwrap();
        assert!(c < 1e-6, "{c}");
        assert!(trace.steps.len() <= 300);
    }

    #[test]
    fn sphere_to_ellipsoid_samples() {
        let m = shapes::icosphere(2, 1.0);
        let gen = single(&m);
        let samples: Vec<Vec3> = shapes::icosphere(2, 1.0)
            .vertices()
            .iter()
            .map(|p| Vec3::new(p.x, p.y, p.z * 1.3))
            .collect();
        let before = chamfer(m.vertices(), &samples).unwrap();
        let (out, trace) = refine(&gen, &[samples.clone()], &RefineConfig::default()).unwrap();
        let after = chamfer(&out.vertex_sets[0], &samples).unwrap();
        assert!(after <= 0.2 * before, "{before} -> {after}");
        for w in trace.epochs.windows(2) {
            assert!(w[1].total <= w[0].total + 1e-9);
        }
        let path = tempfile::NamedTempFile::new().unwrap();
        trace.write_csv(path.path()).unwrap();
        let text = std::fs::read_to_string(path.path()).unwrap();
        assert!(text.starts_with("step,chamfer,acap_reg,total\n"));
        assert_eq!(text.lines().count(), trace.steps.len() + 1);
    }

    #[test]
    fn epochs_monotone_with_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = shapes::icosphere(2, 1.0);
        let sets: Vec<Vec<Vec3>> = (0..3)
            .map(|k| m.vertices().iter().map(|p| p * (1.0 + 0.1 * k as f64)).collect())
            .collect();
        let gen = DiscreteGenerator {
            faces: m.faces().to_vec(),
            vertex_sets: sets.clone(),
            codes: (0..3).map(|k| LatentCode::new(vec![k as f64]).unwrap()).collect(),
            edges: vec![(0, 1), (1, 2)],
        };
        let targets: Vec<Vec<Vec3>> = sets
            .iter()
            .map(|s| s.iter().map(|p| p + Vec3::new(rng.gen_range(-0.05..0.05), 0.0, 0.1 * p.x * p.y)).collect())
            .collect();
        let cfg = RefineConfig {
            lambda_d: 1.0,
            steps: 60,
            ..RefineConfig::default()
        };
        let (out, trace) = refine(&gen, &targets, &cfg).unwrap();
        assert!(trace.epochs.len() >= 2);
        for w in trace.epochs.windows(2) {
            assert!(w[1].total <= w[0].total + 1e-9);
        }
        assert_eq!(out.faces, gen.faces);
    }
}
