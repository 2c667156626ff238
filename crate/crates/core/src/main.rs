use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use shapecorr::energy::{acap_energy_oracle, arap_energy_oracle, build_acap, build_arap, build_combined, similarity_field};
use shapecorr::eval::{self, DEFAULT_MAX_ERROR};
use shapecorr::implicit::{latent_path, marching_cubes, ImplicitGenerator, LatentCode, VoxelGrid};
use shapecorr::induced::{build_constraints, solve_displacement, DEFAULT_EPSILON};
use shapecorr::mesh::{self, write_correspondences, CorrFormat, MeshFormat, TriMesh, Vec3};
use shapecorr::pipeline::{self, load_generator, PipelineConfig, DEFAULT_K};
use shapecorr::refine::{self, init_generator, RefineConfig, DEFAULT_LAMBDA_D, DEFAULT_REBUILD_EVERY};
use shapecorr::registration::{
    build_shape_graph, propagate_correspondences, register_along_path_to, register_arap, register_graph_edges,
    DataTerm, EdgeRegistrations, RegisterConfig, RegistrationResult, ShapeGraph, DEFAULT_PATH_STEPS,
};
use shapecorr::synth::{synth_collection, write_collection, Family, Manifest, SynthSpec, MANIFEST_FILE};
use shapecorr::{Error, Result};

#[derive(Parser)]
#[command(name = "shapecorr", version, about = "Joint shape matching over deformable shape collections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic collection with ground truth.
    Synth(SynthArgs),
    /// Check the ARAP/ACAP quadratic forms of a mesh against direct evaluation.
    EnergyCheck(EnergyArgs),
    /// Induced displacement of a level-set mesh for a latent direction.
    Correspond(CorrespondArgs),
    /// Extract level sets along a latent segment.
    Interpolate(InterpolateArgs),
    /// ARAP non-rigid registration of one mesh onto another.
    Register(RegisterArgs),
    /// Build the latent K-NN shape graph and register its edges.
    Graph(GraphArgs),
    /// Propagate template correspondences along shortest graph paths.
    Propagate(PropagateArgs),
    /// Refine registered templates against the input shapes.
    Refine(RefineArgs),
    /// Geodesic error of predicted correspondences against ground truth.
    Evaluate(EvaluateArgs),
    /// Run all stages and write a JSON report.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    family: String,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnergyArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long, default_value_t = 10)]
    fields: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
    /// Write the combined matrix in Matrix Market format.
    #[arg(long)]
    matrix_out: Option<PathBuf>,
}

#[derive(Args)]
struct GeneratorArgs {
    /// Manifest, generator JSON, or MLP weights.
    #[arg(long)]
    generator: PathBuf,
    /// Samples per axis of the extraction grid.
    #[arg(long, default_value_t = 64)]
    grid_n: usize,
    /// Half-width of the cubic extraction grid around the origin.
    #[arg(long, default_value_t = 2.0)]
    grid_half: f64,
}

impl GeneratorArgs {
    fn load(&self) -> Result<ImplicitGenerator> {
        if let Ok(m) = Manifest::load(&self.generator) {
            if let Some(g) = m.generator {
                return Ok(g);
            }
        }
        load_generator(&self.generator)
    }

    fn grid(&self) -> Result<VoxelGrid> {
        VoxelGrid::cube(Vec3::zeros(), self.grid_half, self.grid_n)
    }
}

#[derive(Args)]
struct CorrespondArgs {
    #[command(flatten)]
    gen: GeneratorArgs,
    /// Comma-separated latent code.
    #[arg(long, allow_hyphen_values = true)]
    z: String,
    /// Comma-separated latent direction.
    #[arg(long, allow_hyphen_values = true)]
    v: String,
    /// Level-set mesh at `z`; extracted on the grid when omitted.
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
    #[arg(long)]
    mu: Option<f64>,
    /// Displaced mesh.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InterpolateArgs {
    #[command(flatten)]
    gen: GeneratorArgs,
    #[arg(long, allow_hyphen_values = true)]
    z0: String,
    #[arg(long, allow_hyphen_values = true)]
    z1: String,
    #[arg(long, default_value_t = DEFAULT_PATH_STEPS)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataTermArg {
    Point,
    Plane,
}

#[derive(Args)]
struct RegisterOpts {
    #[arg(long, default_value_t = 1.0)]
    w_data: f64,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, value_enum, default_value_t = DataTermArg::Point)]
    data_term: DataTermArg,
}

impl RegisterOpts {
    fn config(&self) -> RegisterConfig {
        RegisterConfig {
            w_data: self.w_data,
            max_iters: self.iters,
            data_term: match self.data_term {
                DataTermArg::Point => DataTerm::PointToPoint,
                DataTermArg::Plane => DataTerm::PointToPlane,
            },
            ..RegisterConfig::default()
        }
    }
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: RegisterOpts,
    /// Register along the latent path from `--z-source` to `--z-target`.
    #[arg(long, requires_all = ["z_source", "z_target"])]
    generator: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    z_source: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    z_target: Option<String>,
    #[arg(long, default_value_t = DEFAULT_PATH_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    grid_n: usize,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    /// Guide edge registrations with the manifest's generator.
    #[arg(long)]
    use_generator: bool,
    #[arg(long, default_value_t = DEFAULT_PATH_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    grid_n: usize,
    #[command(flatten)]
    opts: RegisterOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PropagateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory of `graph`.
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of registered templates `shape_XXX.ply`.
    #[arg(long)]
    registered: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA_D)]
    lambda_d: f64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.2)]
    step_size: f64,
    #[arg(long, default_value_t = DEFAULT_REBUILD_EVERY)]
    rebuild_every: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of predicted correspondences `corr_XXX.corr`.
    #[arg(long)]
    pred: PathBuf,
    /// Also write colored error meshes here.
    #[arg(long)]
    errors_out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_ERROR)]
    max_error: f64,
}

#[derive(Args)]
struct PipelineArgs {
    /// JSON config; every field can be overridden below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// `key=value` override of any config field, e.g. `alpha=5` or
    /// `stages.stage3=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn parse_code(s: &str) -> Result<LatentCode> {
    let values = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("bad latent entry {t:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    LatentCode::new(values)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn manifest_root(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn registration_json(r: &RegistrationResult) -> Value {
    json!({
        "data_residual": r.data_residual,
        "arap_energy": r.arap_energy,
        "iterations": r.iterations,
        "converged": r.converged,
        "diverged": r.diverged,
    })
}

fn synth(a: SynthArgs) -> Result<()> {
    let family: Family = a.family.parse()?;
    let col = synth_collection(&SynthSpec {
        family,
        count: a.count,
        seed: a.seed,
        spread: a.spread,
    })?;
    write_collection(&col, &a.out)?;
    println!("{}", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn energy_check(a: EnergyArgs) -> Result<()> {
    let m = mesh::load_mesh(&a.mesh)?;
    let arap = build_arap(&m);
    let acap = build_acap(&m);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut worst_arap: f64 = 0.0;
    let mut worst_acap: f64 = 0.0;
    for _ in 0..a.fields {
        let d: Vec<f64> = (0..3 * m.n()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (qa, oa) = (arap.energy(&d)?, arap_energy_oracle(&m, &d)?);
        let (qc, oc) = (acap.energy(&d)?, acap_energy_oracle(&m, &d)?);
        worst_arap = worst_arap.max((qa - oa).abs() / oa.abs().max(f64::MIN_POSITIVE));
        worst_acap = worst_acap.max((qc - oc).abs() / oc.abs().max(f64::MIN_POSITIVE));
    }
    let unit = |d: Vec<f64>| {
        let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        d.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let c = m.vertices().iter().sum::<Vec3>() / m.n() as f64;
    let translation = unit(similarity_field(&m, 0.0, &Vec3::zeros(), &Vec3::new(0.3, -0.5, 0.8)));
    let rigid = unit(similarity_field(&m, 0.0, &Vec3::new(0.2, 0.7, -0.4), &Vec3::new(0.1, 0.0, 0.2)));
    let similarity = unit(similarity_field(&m, 0.6, &Vec3::new(-0.3, 0.2, 0.5), &-(c * 0.6)));
    let scaling = unit(similarity_field(&m, 1.0, &Vec3::zeros(), &-c));
    if let Some(p) = &a.matrix_out {
        build_combined(&m, a.alpha)?.write_matrix_market(p)?;
    }
    print_json(&json!({
        "vertices": m.n(),
        "nnz": arap.matrix().nnz(),
        "fields": a.fields,
        "arap_max_relative_error": worst_arap,
        "acap_max_relative_error": worst_acap,
        "translation": {"arap": arap.energy(&translation)?, "acap": acap.energy(&translation)?},
        "rigid_arap": arap.energy(&rigid)?,
        "similarity_acap": acap.energy(&similarity)?,
        "scaling_arap": arap.energy(&scaling)?,
        "diagnostics": arap.diagnostics(),
    }))
}

fn correspond(a: CorrespondArgs) -> Result<()> {
    let gen = a.gen.load()?;
    let z = parse_code(&a.z)?;
    let v = parse_code(&a.v)?.into_vec();
    let m = match &a.mesh {
        Some(p) => mesh::load_mesh(p)?,
        None => marching_cubes(&gen, &z, &a.gen.grid()?)?.mesh,
    };
    let form = build_combined(&m, a.alpha)?;
    let cs = build_constraints(&gen, &m, &z)?;
    let field = solve_displacement(&form, &cs, &v, a.epsilon, a.mu)?;
    let moved: Vec<Vec3> = m
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, p)| p + Vec3::new(field.d[3 * i], field.d[3 * i + 1], field.d[3 * i + 2]))
        .collect();
    mesh::save_mesh(&m.with_vertices(moved)?, &a.out, MeshFormat::from_path(&a.out)?)?;
    print_json(&json!({
        "vertices": m.n(),
        "constraint_rows": cs.n_rows(),
        "dropped_vertices": cs.dropped_vertices(),
        "energy": form.energy(&field.d)?,
        "diagnostics": field.diagnostics,
    }))
}

fn interpolate(a: InterpolateArgs) -> Result<()> {
    let gen = a.gen.load()?;
    let (z0, z1) = (parse_code(&a.z0)?, parse_code(&a.z1)?);
    let mut codes = vec![z0.clone()];
    codes.extend(latent_path(&z0, &z1, a.steps)?);
    codes.push(z1);
    let grid = a.gen.grid()?;
    create_dir(&a.out)?;
    let mut rows = Vec::new();
    for (j, z) in codes.iter().enumerate() {
        let ex = marching_cubes(&gen, z, &grid).map_err(|e| Error::Stage {
            stage: format!("code {j}"),
            source: Box::new(e),
        })?;
        let name = format!("step_{j:03}.ply");
        mesh::save_mesh(&ex.mesh, a.out.join(&name), MeshFormat::PlyBinary)?;
        rows.push(json!({"mesh": name, "code": z, "vertices": ex.mesh.n()}));
    }
    print_json(&rows)
}

fn register(a: RegisterArgs) -> Result<()> {
    let source = mesh::load_mesh(&a.source)?;
    let target = mesh::load_mesh(&a.target)?;
    let cfg = a.opts.config();
    let (result, steps) = match &a.generator {
        Some(g) => {
            let gen = GeneratorArgs {
                generator: g.clone(),
                grid_n: a.grid_n,
                grid_half: 0.0,
            }
            .load()?;
            let (zs, zt) = (
                parse_code(a.z_source.as_deref().unwrap_or_default())?,
                parse_code(a.z_target.as_deref().unwrap_or_default())?,
            );
            let all: Vec<Vec3> = source.vertices().iter().chain(target.vertices()).copied().collect();
            let (lo, hi) = mesh::bbox(&all);
            let pad = Vec3::repeat(0.1 * (hi - lo).norm());
            let grid = VoxelGrid::bounding(lo - pad, hi + pad, [a.grid_n; 3])?;
            let p = register_along_path_to(&source, &gen, &zs, &zt, a.steps, &grid, Some(&target), &cfg)?;
            (p.result, serde_json::to_value(&p.steps)?)
        }
        None => (register_arap(&source, &target, &cfg)?, Value::Null),
    };
    mesh::save_mesh(&result.deformed, &a.out, MeshFormat::from_path(&a.out)?)?;
    let mut report = registration_json(&result);
    report["path_steps"] = steps;
    print_json(&report)
}

#[derive(Serialize, serde::Deserialize)]
struct EdgeMap {
    i: usize,
    j: usize,
    positions: Vec<Vec3>,
}

fn graph(a: GraphArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let meshes = manifest.load_meshes(&manifest_root(&a.manifest))?;
    let codes = manifest.codes();
    let k = a.k.unwrap_or(DEFAULT_K).min(meshes.len().saturating_sub(1));
    let mut g = build_shape_graph(&codes, k, manifest.template)?;
    let cfg = a.opts.config();
    let guide = match (a.use_generator, &manifest.generator) {
        (true, Some(gen)) => {
            let all: Vec<Vec3> = meshes.iter().flat_map(|m| m.vertices().iter().copied()).collect();
            let (lo, hi) = mesh::bbox(&all);
            let pad = Vec3::repeat(0.1 * (hi - lo).norm());
            Some((gen, VoxelGrid::bounding(lo - pad, hi + pad, [a.grid_n; 3])?))
        }
        (true, None) => return Err(Error::InvalidArgument("manifest has no generator".into())),
        (false, _) => None,
    };
    let maps = register_graph_edges(&mut g, &meshes, |i, j| match &guide {
        Some((gen, grid)) => {
            register_along_path_to(&meshes[i], gen, &codes[i], &codes[j], a.steps, grid, Some(&meshes[j]), &cfg)
                .map(|p| p.result)
        }
        None => register_arap(&meshes[i], &meshes[j], &cfg),
    })?;
    create_dir(&a.out)?;
    write_text(&a.out.join("graph.json"), &g.to_json()?)?;
    let edges: Vec<EdgeMap> = maps
        .into_iter()
        .map(|((i, j), positions)| EdgeMap { i, j, positions })
        .collect();
    write_text(&a.out.join("edge_maps.json"), &serde_json::to_string(&edges)?)?;
    print_json(&json!({"shapes": g.n(), "k": g.k, "edges": g.edges}))
}

fn propagate(a: PropagateArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let meshes = manifest.load_meshes(&manifest_root(&a.manifest))?;
    let read = |name: &str| {
        let p = a.graph.join(name);
        fs::read_to_string(&p).map_err(|e| Error::Io { path: p, source: e })
    };
    let g = ShapeGraph::from_json(&read("graph.json")?)?;
    let edges: Vec<EdgeMap> = serde_json::from_str(&read("edge_maps.json")?)?;
    let maps: EdgeRegistrations = edges.into_iter().map(|e| ((e.i, e.j), e.positions)).collect();
    let prop = propagate_correspondences(&g, &maps, &meshes)?;
    create_dir(&a.out)?;
    let template = &meshes[g.template];
    for (i, pos) in prop.positions.iter().enumerate() {
        mesh::save_mesh(&template.with_vertices(pos.clone())?, a.out.join(format!("shape_{i:03}.ply")), MeshFormat::PlyBinary)?;
        let corr = eval::snap_to_vertices(pos, &meshes[i])?;
        write_correspondences(&corr, a.out.join(format!("corr_{i:03}.corr")), CorrFormat::Binary)?;
    }
    print_json(&json!({"paths": prop.paths, "distances": prop.distances}))
}

fn refine_cmd(a: RefineArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let meshes = manifest.load_meshes(&manifest_root(&a.manifest))?;
    let templates = (0..meshes.len())
        .map(|i| mesh::load_mesh(a.registered.join(format!("shape_{i:03}.ply"))))
        .collect::<Result<Vec<TriMesh>>>()?;
    let codes = manifest.codes();
    let k = a.k.unwrap_or(DEFAULT_K).min(meshes.len().saturating_sub(1));
    let g = build_shape_graph(&codes, k, manifest.template)?;
    let gen = init_generator(&templates, &codes, &g)?;
    let targets: Vec<Vec<Vec3>> = meshes.iter().map(|m| m.vertices().to_vec()).collect();
    let cfg = RefineConfig {
        lambda_d: a.lambda_d,
        steps: a.steps,
        step_size: a.step_size,
        rebuild_every: a.rebuild_every,
        dump_on_failure: Some(a.out.join("failure_state.json")),
    };
    create_dir(&a.out)?;
    let (refined, trace) = refine::refine(&gen, &targets, &cfg)?;
    trace.write_csv(a.out.join("trace.csv"))?;
    for (i, m) in refined.meshes()?.iter().enumerate() {
        mesh::save_mesh(m, a.out.join(format!("shape_{i:03}.ply")), MeshFormat::PlyBinary)?;
        let corr = eval::snap_to_vertices(m.vertices(), &meshes[i])?;
        write_correspondences(&corr, a.out.join(format!("corr_{i:03}.corr")), CorrFormat::Binary)?;
    }
    print_json(&json!({"epochs": trace.epochs, "accepted_steps": trace.steps.len()}))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let root = manifest_root(&a.manifest);
    let meshes = manifest.load_meshes(&root)?;
    let gt = manifest.load_ground_truth(&root)?;
    let others: Vec<usize> = (0..meshes.len()).filter(|&i| i != manifest.template).collect();
    let pred = others
        .iter()
        .map(|&i| mesh::read_correspondences(a.pred.join(format!("corr_{i:03}.corr"))))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = others.iter().map(|&i| gt[i].clone()).collect();
    let targets: Vec<TriMesh> = others.iter().map(|&i| meshes[i].clone()).collect();
    let metrics = eval::eval_correspondences(&pred, &gts, &targets, manifest.scale)?;
    if let Some(dir) = &a.errors_out {
        create_dir(dir)?;
        let template = &meshes[manifest.template];
        for ((errors, &i), corr) in metrics.per_vertex.iter().zip(&others).zip(&pred) {
            if errors.len() != template.n() {
                log::warn!("shape {i}: partial coverage, no error field");
                continue;
            }
            let mut sorted = corr.clone();
            sorted.sort_unstable();
            let pos: Vec<Vec3> = sorted.iter().map(|&(_, t)| meshes[i].vertices()[t as usize]).collect();
            eval::export_error_field(errors, &template.with_vertices(pos)?, dir.join(format!("shape_{i:03}.ply")), a.max_error)?;
        }
    }
    print_json(&json!({
        "units": manifest.units,
        "mean": metrics.mean,
        "median": metrics.median,
        "per_shape": others.iter().zip(&metrics.per_shape).map(|(i, m)| json!({"shape": i, "mean": m.mean, "median": m.median, "max": m.max})).collect::<Vec<_>>(),
    }))
}

/// Sets `a.b.c = value` inside a JSON object, parsing `value` as JSON when
/// possible and as a string otherwise.
fn apply_override(config: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override {assignment:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = config;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("{key}: {} is not an object", parts[..depth].join("."))))?;
        if depth + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| json!({}));
    }
    Ok(())
}

fn pipeline_cmd(a: PipelineArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str::<Value>(&text)?
        }
        None => json!({}),
    };
    for s in &a.set {
        apply_override(&mut config, s)?;
    }
    let mut cfg: PipelineConfig = serde_json::from_value(config)?;
    cfg.seed = a.seed;
    if let Some(m) = a.manifest {
        cfg.manifest = m;
    }
    if let Some(o) = a.output {
        cfg.output = o;
    }
    let report = match a.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(|| pipeline::run_pipeline(&cfg))?,
        None => pipeline::run_pipeline(&cfg)?,
    };
    let summary = |m: &Option<shapecorr::eval::CorrespondenceMetrics>| m.as_ref().map(|m| json!({"mean": m.mean, "median": m.median}));
    print_json(&json!({
        "report": cfg.output.join(pipeline::REPORT_FILE),
        "final_stage": report.final_stage,
        "final": summary(&report.final_metrics),
        "baseline": report.baseline.as_ref().and_then(|b| summary(&b.metrics)),
    }))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::EnergyCheck(a) => energy_check(a),
        Command::Correspond(a) => correspond(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Register(a) => register(a),
        Command::Graph(a) => graph(a),
        Command::Propagate(a) => propagate(a),
        Command::Refine(a) => refine_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Pipeline(a) => pipeline_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut shown = e.to_string();
            eprintln!("error: {shown}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let text = s.to_string();
                if !shown.contains(&text) {
                    eprintln!("  caused by: {text}");
                    shown = text;
                }
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
