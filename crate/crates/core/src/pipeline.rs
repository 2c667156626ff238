//! End-to-end driver: generator diagnostics, interpolation-guided
//! registration with shape-graph fallback, refinement, and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{build_combined, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::eval::{self, CorrespondenceMetrics, DEFAULT_MAX_ERROR};
use crate::implicit::{load_mlp_weights, marching_cubes, ImplicitGenerator, LatentCode, VoxelGrid};
use crate::induced::{
    build_constraints, cycle_residual, r_geo, CycleOptions, GeoOptions, TraceMode, DEFAULT_EPSILON, DEFAULT_EPS_CYC,
};
use crate::mesh::{self, simplify, SurfaceLocator, write_correspondences, CorrFormat, Correspondence, MeshFormat, TriMesh, Vec3};
use crate::refine::{self, init_generator, RefineConfig, RefineLoss, DEFAULT_LAMBDA_D, DEFAULT_REBUILD_EVERY};
use crate::registration::{
    build_shape_graph, propagate_correspondences, register_along_path_to, register_arap, register_graph_edges,
    DataTerm, RegisterConfig, RegistrationResult, ShapeGraph, DEFAULT_PATH_STEPS,
};
use crate::synth::Manifest;

pub const REPORT_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const FAILURE_FILE: &str = "failure.json";

/// Graph degree for desk-scale collections, clipped to `n - 1`.
pub const DEFAULT_K: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub stage1: bool,
    pub stage2: bool,
    pub baseline: bool,
    pub stage3: bool,
    pub evaluate: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            stage1: true,
            stage2: true,
            baseline: true,
            stage3: true,
            evaluate: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// Propagate through the shape graph only for shapes whose path
    /// registration failed.
    Auto,
    Always,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub output: PathBuf,
    /// Overrides the manifest's generator: generator JSON or MLP weights.
    pub generator: Option<PathBuf>,
    pub seed: u64,
    pub stages: StageToggles,

    pub epsilon: f64,
    pub alpha: f64,
    pub lambda_geo: f64,
    pub lambda_cyc: f64,
    pub mu: Option<f64>,
    pub eps_cyc: f64,
    pub trace: Option<TraceMode>,
    pub stage1_samples: usize,
    pub simplify_target: usize,
    pub grid_dims: [usize; 3],
    /// Grid margin around the collection's bounding box, as a fraction of
    /// its diagonal.
    pub grid_padding: f64,

    pub path_steps: usize,
    pub k: Option<usize>,
    pub graph_mode: GraphMode,
    pub w_data: f64,
    pub register_iters: usize,
    pub data_term: DataTerm,
    /// RMS closest-point distance, as a fraction of the target's bounding
    /// box diagonal, above which a path registration counts as failed.
    pub fallback_residual: f64,

    pub lambda_d: f64,
    pub refine_steps: usize,
    pub refine_step_size: f64,
    pub rebuild_every: usize,

    pub max_error: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            manifest: PathBuf::from("manifest.json"),
            output: PathBuf::from("out"),
            generator: None,
            seed: 0,
            stages: StageToggles::default(),
            epsilon: DEFAULT_EPSILON,
            alpha: DEFAULT_ALPHA,
            lambda_geo: 1e-3,
            lambda_cyc: 1e-4,
            mu: None,
            eps_cyc: DEFAULT_EPS_CYC,
            trace: None,
            stage1_samples: 2,
            simplify_target: 2000,
            grid_dims: [64, 77, 64],
            grid_padding: 0.1,
            path_steps: DEFAULT_PATH_STEPS,
            k: None,
            graph_mode: GraphMode::Auto,
            w_data: 1.0,
            register_iters: 50,
            data_term: DataTerm::PointToPoint,
            fallback_residual: 0.02,
            lambda_d: DEFAULT_LAMBDA_D,
            refine_steps: 200,
            refine_step_size: 0.2,
            rebuild_every: DEFAULT_REBUILD_EVERY,
            max_error: DEFAULT_MAX_ERROR,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("alpha", self.alpha),
            ("lambda_geo", self.lambda_geo),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_d", self.lambda_d),
            ("grid_padding", self.grid_padding),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        let pos = [
            ("epsilon", self.epsilon),
            ("eps_cyc", self.eps_cyc),
            ("w_data", self.w_data),
            ("fallback_residual", self.fallback_residual),
            ("refine_step_size", self.refine_step_size),
            ("max_error", self.max_error),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if let Some(mu) = self.mu {
            if !(mu >= 0.0) {
                return Err(Error::InvalidArgument(format!("mu must be >= 0, got {mu}")));
            }
        }
        if self.grid_dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidArgument(format!("grid_dims must be >= 2, got {:?}", self.grid_dims)));
        }
        if self.rebuild_every == 0 {
            return Err(Error::InvalidArgument("rebuild_every must be >= 1".into()));
        }
        if self.k == Some(0) {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if self.stages.stage3 && !self.stages.stage2 {
            return Err(Error::InvalidArgument("stage3 refines the stage2 registrations and needs stage2".into()));
        }
        Ok(())
    }

    fn register_config(&self) -> RegisterConfig {
        RegisterConfig {
            w_data: self.w_data,
            max_iters: self.register_iters,
            data_term: self.data_term,
            ..RegisterConfig::default()
        }
    }
}

/// Independent generator per stage: the master seed picks the key and the
/// stage index picks the stream.
pub fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

/// Generator JSON (any variant) or bare MLP weights.
pub fn load_generator(path: impl AsRef<Path>) -> Result<ImplicitGenerator> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match serde_json::from_str::<ImplicitGenerator>(&text) {
        Ok(g) => Ok(g),
        Err(_) => Ok(ImplicitGenerator::Mlp(load_mlp_weights(path)?)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub n_shapes: usize,
    pub template: usize,
    pub latent_dim: usize,
    pub family: Option<String>,
    pub units: String,
    pub scale: f64,
    pub k: usize,
    pub generator: Option<String>,
    pub grid: Option<VoxelGrid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeDiagnostics {
    pub code: LatentCode,
    pub n_vertices: usize,
    pub r_geo: f64,
    pub trace: f64,
    pub trace_mode: TraceMode,
    pub mu: f64,
    pub cycle_basis: usize,
    pub r_cyc: f64,
    pub r_cyc_per_coordinate: f64,
    pub g_norm_sq: f64,
    /// `lambda_geo * r_geo + lambda_cyc * r_cyc`.
    pub weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub samples: Vec<CodeDiagnostics>,
    pub mean_weighted: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Template,
    Path,
    Graph,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRegistration {
    pub shape: usize,
    pub route: Route,
    pub data_residual: f64,
    pub arap_energy: f64,
    pub iterations: usize,
    pub diverged: bool,
    /// Why the path registration was rejected, if it was.
    pub path_failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub shapes: Vec<ShapeRegistration>,
    pub graph: Option<ShapeGraph>,
    pub graph_paths: Option<Vec<Vec<usize>>>,
    pub metrics: Option<CorrespondenceMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub shapes: Vec<ShapeRegistration>,
    pub metrics: Option<CorrespondenceMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Report {
    pub graph_edges: Vec<(usize, usize)>,
    pub epochs: Vec<RefineLoss>,
    pub accepted_steps: usize,
    pub final_step_size: f64,
    pub metrics: Option<CorrespondenceMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub version: u32,
    pub config: PipelineConfig,
    pub resolved: Resolved,
    pub stage1: Option<Stage1Report>,
    pub stage2: Option<Stage2Report>,
    pub baseline: Option<BaselineReport>,
    pub stage3: Option<Stage3Report>,
    pub final_stage: Option<String>,
    pub final_metrics: Option<CorrespondenceMetrics>,
}

#[derive(Debug, Serialize)]
struct Failure<'a> {
    stage: &'a str,
    error: String,
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn collection_grid(meshes: &[TriMesh], dims: [usize; 3], padding: f64) -> Result<VoxelGrid> {
    let all: Vec<Vec3> = meshes.iter().flat_map(|m| m.vertices().iter().copied()).collect();
    let (lo, hi) = mesh::bbox(&all);
    let pad = Vec3::repeat(padding * (hi - lo).norm());
    VoxelGrid::bounding(lo - pad, hi + pad, dims)
}

struct Context {
    cfg: PipelineConfig,
    manifest: Manifest,
    meshes: Vec<TriMesh>,
    codes: Vec<LatentCode>,
    generator: Option<ImplicitGenerator>,
    grid: Option<VoxelGrid>,
    gt: Option<Vec<Correspondence>>,
    k: usize,
}

impl Context {
    fn template(&self) -> usize {
        self.manifest.template
    }

    fn others(&self) -> Vec<usize> {
        (0..self.meshes.len()).filter(|&i| i != self.template()).collect()
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.output.join(rel)
    }

    /// Errors against ground truth for the non-template shapes.
    fn evaluate(&self, positions: &[Vec<Vec3>]) -> Result<Option<CorrespondenceMetrics>> {
        let gt = match (&self.gt, self.cfg.stages.evaluate) {
            (Some(gt), true) => gt,
            _ => return Ok(None),
        };
        let others = self.others();
        let pred = others
            .iter()
            .map(|&i| eval::snap_to_vertices(&positions[i], &self.meshes[i]))
            .collect::<Result<Vec<_>>>()?;
        let gts: Vec<Correspondence> = others.iter().map(|&i| gt[i].clone()).collect();
        let targets: Vec<TriMesh> = others.iter().map(|&i| self.meshes[i].clone()).collect();
        eval::eval_correspondences(&pred, &gts, &targets, self.manifest.scale).map(Some)
    }

    fn write_stage(&self, dir: &str, positions: &[Vec<Vec3>]) -> Result<()> {
        let dir = self.out(dir);
        create_dir(&dir)?;
        let template = &self.meshes[self.template()];
        for (i, pos) in positions.iter().enumerate() {
            let m = template.with_vertices(pos.clone())?;
            mesh::save_mesh(&m, dir.join(format!("shape_{i:03}.ply")), MeshFormat::PlyBinary)?;
            let corr = eval::snap_to_vertices(pos, &self.meshes[i])?;
            write_correspondences(&corr, dir.join(format!("corr_{i:03}.corr")), CorrFormat::Binary)?;
        }
        Ok(())
    }
}

fn prepare(cfg: &PipelineConfig) -> Result<Context> {
    cfg.validate()?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let root = cfg.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let meshes = manifest.load_meshes(&root)?;
    if meshes.len() < 2 {
        return Err(Error::InvalidArgument("the pipeline needs at least 2 shapes".into()));
    }
    let generator = match &cfg.generator {
        Some(p) => Some(load_generator(p)?),
        None => manifest.generator.clone(),
    };
    let codes = manifest.codes();
    if let Some(g) = &generator {
        if g.latent_dim() != codes[0].dim() {
            return Err(Error::DimensionMismatch {
                expected: g.latent_dim(),
                got: codes[0].dim(),
            });
        }
    }
    let grid = match generator {
        Some(_) => Some(collection_grid(&meshes, cfg.grid_dims, cfg.grid_padding)?),
        None => None,
    };
    let gt = if manifest.shapes.iter().all(|s| s.gt.is_some()) {
        Some(manifest.load_ground_truth(&root)?)
    } else {
        None
    };
    let k = cfg.k.unwrap_or(DEFAULT_K).min(meshes.len() - 1);
    Ok(Context {
        cfg: cfg.clone(),
        manifest,
        meshes,
        codes,
        generator,
        grid,
        gt,
        k,
    })
}

fn stage1(ctx: &Context) -> Result<Stage1Report> {
    let gen = ctx
        .generator
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("no implicit generator in manifest or config".into()))?;
    let grid = ctx.grid.as_ref().expect("grid exists with a generator");
    let cfg = &ctx.cfg;
    let mut rng = stage_rng(cfg.seed, 1);
    let n = ctx.codes.len();
    let d = gen.latent_dim();
    let mut samples = Vec::with_capacity(cfg.stage1_samples);
    for s in 0..cfg.stage1_samples {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let t: f64 = rng.gen_range(0.0..1.0);
        let diff: Vec<f64> = ctx.codes[b].as_slice().iter().zip(ctx.codes[a].as_slice()).map(|(x, y)| x - y).collect();
        let z = ctx.codes[a].offset(t, &diff)?;
        let basis = rng.gen_range(0..d);
        let trace = cfg.trace.map(|m| match m {
            TraceMode::Hutchinson { probes, .. } => TraceMode::Hutchinson {
                probes,
                seed: rng.gen(),
            },
            TraceMode::Exact => TraceMode::Exact,
        });
        let label = format!("sample {s}");
        let run = || -> Result<CodeDiagnostics> {
            let ex = marching_cubes(gen, &z, grid)?;
            let (m, _) = simplify(&ex.mesh, cfg.simplify_target)?;
            let form = build_combined(&m, cfg.alpha)?;
            let cs = build_constraints(gen, &m, &z)?;
            let geo = r_geo(&form, &cs, &GeoOptions { mu: cfg.mu, trace })?;
            let cyc = cycle_residual(
                gen,
                &m,
                &z,
                basis,
                &CycleOptions {
                    eps_cyc: cfg.eps_cyc,
                    epsilon: cfg.epsilon,
                    alpha: cfg.alpha,
                    mu: cfg.mu,
                },
            )?;
            Ok(CodeDiagnostics {
                code: z.clone(),
                n_vertices: m.n(),
                r_geo: geo.value,
                trace: geo.trace,
                trace_mode: geo.mode,
                mu: geo.mu,
                cycle_basis: basis,
                r_cyc: cyc.residual,
                r_cyc_per_coordinate: cyc.residual_per_coordinate,
                g_norm_sq: cyc.g_norm_sq,
                weighted: cfg.lambda_geo * geo.value + cfg.lambda_cyc * cyc.residual,
            })
        };
        samples.push(run().map_err(|e| Error::stage(&label, e))?);
    }
    let mean_weighted = if samples.is_empty() {
        0.0
    } else {
        samples.iter().map(|s| s.weighted).sum::<f64>() / samples.len() as f64
    };
    Ok(Stage1Report { samples, mean_weighted })
}

fn record(shape: usize, route: Route, r: &RegistrationResult, path_failure: Option<String>) -> ShapeRegistration {
    ShapeRegistration {
        shape,
        route,
        data_residual: r.data_residual,
        arap_energy: r.arap_energy,
        iterations: r.iterations,
        diverged: r.diverged,
        path_failure,
    }
}

fn template_record(shape: usize) -> ShapeRegistration {
    ShapeRegistration {
        shape,
        route: Route::Template,
        data_residual: 0.0,
        arap_energy: 0.0,
        iterations: 0,
        diverged: false,
        path_failure: None,
    }
}

/// Registers `meshes[i]` onto `meshes[j]`, guided by the latent path when a
/// generator is available.
fn pair_registration(ctx: &Context, i: usize, j: usize) -> Result<RegistrationResult> {
    let reg = ctx.cfg.register_config();
    match (&ctx.generator, &ctx.grid) {
        (Some(gen), Some(grid)) => register_along_path_to(
            &ctx.meshes[i],
            gen,
            &ctx.codes[i],
            &ctx.codes[j],
            ctx.cfg.path_steps,
            grid,
            Some(&ctx.meshes[j]),
            &reg,
        )
        .map(|p| p.result),
        _ => register_arap(&ctx.meshes[i], &ctx.meshes[j], &reg),
    }
}

fn path_failure(ctx: &Context, target: usize, r: &Result<RegistrationResult>) -> Option<String> {
    match r {
        Err(e) => Some(e.to_string()),
        Ok(r) if r.diverged => Some("diverged".into()),
        Ok(r) => {
            let limit = ctx.cfg.fallback_residual * ctx.meshes[target].bbox_diagonal();
            let rms = r.data_residual.sqrt();
            (rms > limit).then(|| format!("rms residual {rms:e} above {limit:e}"))
        }
    }
}

/// Per-shape template positions and registration records.
fn stage2(ctx: &Context) -> Result<(Vec<Vec<Vec3>>, Stage2Report)> {
    let t = ctx.template();
    let n = ctx.meshes.len();
    let mode = if ctx.generator.is_none() {
        GraphMode::Always
    } else {
        ctx.cfg.graph_mode
    };
    let direct: Vec<Option<Result<RegistrationResult>>> = (0..n)
        .into_par_iter()
        .map(|i| (i != t && mode != GraphMode::Always).then(|| pair_registration(ctx, t, i)))
        .collect();
    let mut positions: Vec<Option<Vec<Vec3>>> = vec![None; n];
    let mut records: Vec<Option<ShapeRegistration>> = vec![None; n];
    let mut failures: Vec<Option<String>> = vec![None; n];
    positions[t] = Some(ctx.meshes[t].vertices().to_vec());
    records[t] = Some(template_record(t));
    for (i, r) in direct.into_iter().enumerate() {
        let Some(r) = r else { continue };
        let failed = path_failure(ctx, i, &r);
        match (&failed, mode) {
            (None, _) => {
                let r = r.expect("accepted registration");
                positions[i] = Some(r.deformed.vertices().to_vec());
                records[i] = Some(record(i, Route::Path, &r, None));
            }
            (Some(msg), GraphMode::Never) => {
                return Err(Error::stage(&format!("shape {i}"), Error::Numerical(msg.clone())));
            }
            (Some(msg), _) => {
                log::warn!("shape {i}: path registration rejected ({msg}); using the shape graph");
                failures[i] = Some(msg.clone());
            }
        }
    }
    let pending: Vec<usize> = (0..n).filter(|&i| positions[i].is_none()).collect();
    let mut graph_out = None;
    let mut paths_out = None;
    if !pending.is_empty() {
        let mut graph = build_shape_graph(&ctx.codes, ctx.k, t)?;
        let maps = register_graph_edges(&mut graph, &ctx.meshes, |i, j| pair_registration(ctx, i, j))
            .map_err(|e| Error::stage("shape graph", e))?;
        let prop = propagate_correspondences(&graph, &maps, &ctx.meshes).map_err(|e| Error::stage("propagation", e))?;
        let template = &ctx.meshes[t];
        for &i in &pending {
            let pos = prop.positions[i].clone();
            let locator = SurfaceLocator::new(&ctx.meshes[i]);
            let data_residual = pos.iter().map(|p| locator.closest(p).sq_dist).sum::<f64>() / pos.len() as f64;
            records[i] = Some(ShapeRegistration {
                shape: i,
                route: Route::Graph,
                data_residual,
                arap_energy: crate::registration::arap_deformation_energy(template, &pos)?,
                iterations: prop.paths[i].len().saturating_sub(1),
                diverged: false,
                path_failure: failures[i].take(),
            });
            positions[i] = Some(pos);
        }
        graph_out = Some(graph);
        paths_out = Some(prop.paths);
    }
    let positions: Vec<Vec<Vec3>> = positions.into_iter().map(|p| p.expect("every shape placed")).collect();
    let shapes = records.into_iter().map(|r| r.expect("every shape recorded")).collect();
    Ok((
        positions,
        Stage2Report {
            shapes,
            graph: graph_out,
            graph_paths: paths_out,
            metrics: None,
        },
    ))
}

fn baseline(ctx: &Context) -> Result<(Vec<Vec<Vec3>>, Vec<ShapeRegistration>)> {
    let t = ctx.template();
    let reg = ctx.cfg.register_config();
    let results: Vec<Option<RegistrationResult>> = (0..ctx.meshes.len())
        .into_par_iter()
        .map(|i| {
            (i != t)
                .then(|| register_arap(&ctx.meshes[t], &ctx.meshes[i], &reg).map_err(|e| Error::stage(&format!("shape {i}"), e)))
                .transpose()
        })
        .collect::<Result<_>>()?;
    let mut positions = Vec::with_capacity(results.len());
    let mut records = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Some(r) => {
                records.push(record(i, Route::Direct, &r, None));
                positions.push(r.deformed.vertices().to_vec());
            }
            None => {
                records.push(template_record(i));
                positions.push(ctx.meshes[t].vertices().to_vec());
            }
        }
    }
    Ok((positions, records))
}

fn stage3(ctx: &Context, registered: &[Vec<Vec3>]) -> Result<(Vec<Vec<Vec3>>, Stage3Report)> {
    let t = ctx.template();
    let graph = build_shape_graph(&ctx.codes, ctx.k, t)?;
    let templates = registered
        .iter()
        .map(|p| ctx.meshes[t].with_vertices(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let gen = init_generator(&templates, &ctx.codes, &graph)?;
    let targets: Vec<Vec<Vec3>> = ctx.meshes.iter().map(|m| m.vertices().to_vec()).collect();
    let rcfg = RefineConfig {
        lambda_d: ctx.cfg.lambda_d,
        steps: ctx.cfg.refine_steps,
        step_size: ctx.cfg.refine_step_size,
        rebuild_every: ctx.cfg.rebuild_every,
        dump_on_failure: Some(ctx.out("stage3_failure_state.json")),
    };
    let (refined, trace) = refine::refine(&gen, &targets, &rcfg)?;
    create_dir(&ctx.out("stage3"))?;
    trace.write_csv(ctx.out("stage3/trace.csv"))?;
    Ok((
        refined.vertex_sets.clone(),
        Stage3Report {
            graph_edges: refined.edges.clone(),
            epochs: trace.epochs.clone(),
            accepted_steps: trace.steps.len(),
            final_step_size: trace.final_step_size,
            metrics: None,
        },
    ))
}

fn metrics_csv(report: &PipelineReport) -> String {
    let mut out = String::from("stage,shape,mean,median,max\n");
    let mut rows = |stage: &str, m: &Option<CorrespondenceMetrics>, shapes: &[usize]| {
        if let Some(m) = m {
            out.push_str(&format!("{stage},all,{:e},{:e},\n", m.mean, m.median));
            for (s, sm) in shapes.iter().zip(&m.per_shape) {
                out.push_str(&format!("{stage},{s},{:e},{:e},{:e}\n", sm.mean, sm.median, sm.max));
            }
        }
    };
    let shapes: Vec<usize> = (0..report.resolved.n_shapes).filter(|&i| i != report.resolved.template).collect();
    if let Some(b) = &report.baseline {
        rows("baseline", &b.metrics, &shapes);
    }
    if let Some(s) = &report.stage2 {
        rows("stage2", &s.metrics, &shapes);
    }
    if let Some(s) = &report.stage3 {
        rows("stage3", &s.metrics, &shapes);
    }
    out
}

fn fail(cfg: &PipelineConfig, stage: &str, e: Error) -> Error {
    let _ = write_json(
        &cfg.output.join(FAILURE_FILE),
        &Failure {
            stage,
            error: e.to_string(),
        },
    );
    Error::stage(stage, e)
}

/// Runs the enabled stages, writing artifacts under `config.output` as each
/// stage finishes, and returns the report that is also written to
/// `report.json`. A failing stage leaves earlier artifacts in place and
/// writes `failure.json`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport> {
    create_dir(&config.output)?;
    let _ = fs::remove_file(config.output.join(FAILURE_FILE));
    let ctx = prepare(config).map_err(|e| fail(config, "setup", e))?;
    let cfg = &ctx.cfg;
    let mut report = PipelineReport {
        version: REPORT_VERSION,
        config: cfg.clone(),
        resolved: Resolved {
            n_shapes: ctx.meshes.len(),
            template: ctx.template(),
            latent_dim: ctx.codes[0].dim(),
            family: ctx.manifest.family.clone(),
            units: ctx.manifest.units.clone(),
            scale: ctx.manifest.scale,
            k: ctx.k,
            generator: ctx.generator.as_ref().map(|g| generator_kind(g).to_string()),
            grid: ctx.grid,
        },
        stage1: None,
        stage2: None,
        baseline: None,
        stage3: None,
        final_stage: None,
        final_metrics: None,
    };

    if cfg.stages.stage1 && ctx.generator.is_some() {
        let s1 = stage1(&ctx).map_err(|e| fail(cfg, "stage I", e))?;
        write_json(&ctx.out("stage1.json"), &s1)?;
        report.stage1 = Some(s1);
    }

    if cfg.stages.baseline {
        let (pos, shapes) = baseline(&ctx).map_err(|e| fail(cfg, "baseline", e))?;
        ctx.write_stage("baseline", &pos)?;
        let metrics = ctx.evaluate(&pos).map_err(|e| fail(cfg, "baseline evaluation", e))?;
        report.baseline = Some(BaselineReport { shapes, metrics });
    }

    let mut final_positions = None;
    if cfg.stages.stage2 {
        let (pos, mut s2) = stage2(&ctx).map_err(|e| fail(cfg, "stage II", e))?;
        ctx.write_stage("stage2", &pos)?;
        if let Some(g) = &s2.graph {
            write_json(&ctx.out("stage2/graph.json"), g)?;
        }
        s2.metrics = ctx.evaluate(&pos).map_err(|e| fail(cfg, "stage II evaluation", e))?;
        report.final_stage = Some("stage2".into());
        report.final_metrics = s2.metrics.clone();
        report.stage2 = Some(s2);

        if cfg.stages.stage3 {
            let (refined, mut s3) = stage3(&ctx, &pos).map_err(|e| fail(cfg, "stage III", e))?;
            ctx.write_stage("stage3", &refined)?;
            s3.metrics = ctx.evaluate(&refined).map_err(|e| fail(cfg, "stage III evaluation", e))?;
            report.final_stage = Some("stage3".into());
            report.final_metrics = s3.metrics.clone();
            report.stage3 = Some(s3);
            final_positions = Some(refined);
        } else {
            final_positions = Some(pos);
        }
    } else if let Some(b) = &report.baseline {
        report.final_stage = Some("baseline".into());
        report.final_metrics = b.metrics.clone();
    }

    if let (Some(m), Some(pos)) = (&report.final_metrics, &final_positions) {
        let dir = ctx.out("errors");
        create_dir(&dir)?;
        let template = &ctx.meshes[ctx.template()];
        for (errors, &i) in m.per_vertex.iter().zip(&ctx.others()) {
            if errors.len() != template.n() {
                log::warn!("shape {i}: ground truth covers {} of {} vertices; no error field", errors.len(), template.n());
                continue;
            }
            let mesh = template.with_vertices(pos[i].clone())?;
            eval::export_error_field(errors, &mesh, dir.join(format!("shape_{i:03}.ply")), cfg.max_error)?;
        }
    }

    let csv_path = ctx.out("metrics.csv");
    fs::write(&csv_path, metrics_csv(&report)).map_err(|e| Error::io(&csv_path, e))?;
    write_json(&ctx.out(REPORT_FILE), &report)?;
    Ok(report)
}

fn generator_kind(g: &ImplicitGenerator) -> &'static str {
    match g {
        ImplicitGenerator::Sphere { .. } => "sphere",
        ImplicitGenerator::Ellipsoid { .. } => "ellipsoid",
        ImplicitGenerator::CapsuleBlend { .. } => "capsule_blend",
        ImplicitGenerator::RadialBump { .. } => "radial_bump",
        ImplicitGenerator::Translated { .. } => "translated",
        ImplicitGenerator::Mlp(_) => "mlp",
    }
}
