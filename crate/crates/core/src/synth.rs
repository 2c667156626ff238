//! Seeded synthetic shape collections with vertex-identity ground truth.
//!
//! Every shape is an analytic deformation of one template mesh that lies on
//! the zero level set of a latent-conditioned generator, so each shape also
//! lies on its own level set and vertex `v` of shape `i` corresponds to
//! vertex `v` of every other shape.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::implicit::{ArcWarp, Bump, Capsule, ImplicitGenerator, LatentCode, Warp};
use crate::mesh::{self, read_correspondences, write_correspondences, CorrFormat, Correspondence, MeshFormat, TriMesh, Vec3};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const SPHERE_LEVEL: usize = 3;
const CAPSULE_RADIUS: f64 = 0.2;
const CAPSULE_AROUND: usize = 24;
const CAPSULE_CAP_RINGS: usize = 6;
const CAPSULE_BODY_RINGS: usize = 16;
const BEND_GAIN: f64 = 1.2;
const BUMP_COUNT: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    SphereRadius,
    EllipsoidAxes,
    BentCapsule,
    BumpField,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::SphereRadius,
        Family::EllipsoidAxes,
        Family::BentCapsule,
        Family::BumpField,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::SphereRadius => "sphere-radius",
            Family::EllipsoidAxes => "ellipsoid-axes",
            Family::BentCapsule => "bent-capsule",
            Family::BumpField => "bump-field",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Family::ALL.iter().map(|f| f.name()).collect();
                Error::InvalidArgument(format!("unknown family {s:?}, expected one of {}", known.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub family: Family,
    pub count: usize,
    pub seed: u64,
    /// Multiplies the latent range; 0 makes every shape equal the template.
    pub spread: f64,
}

impl SynthSpec {
    pub fn new(family: Family, count: usize, seed: u64) -> Self {
        SynthSpec {
            family,
            count,
            seed,
            spread: 1.0,
        }
    }
}

/// In-memory collection. Shape 0 is the template.
#[derive(Debug, Clone)]
pub struct Collection {
    pub spec: SynthSpec,
    pub generator: ImplicitGenerator,
    pub codes: Vec<LatentCode>,
    pub meshes: Vec<TriMesh>,
}

fn uniform_code(rng: &mut ChaCha8Rng, half_ranges: &[f64]) -> LatentCode {
    LatentCode::new(half_ranges.iter().map(|&h| if h > 0.0 { rng.gen_range(-h..=h) } else { 0.0 }).collect())
        .expect("finite code")
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn codes_for(rng: &mut ChaCha8Rng, count: usize, half_ranges: &[f64]) -> Vec<LatentCode> {
    let mut codes = vec![LatentCode::zeros(half_ranges.len())];
    codes.extend((1..count).map(|_| uniform_code(rng, half_ranges)));
    codes
}

pub fn synth_collection(spec: &SynthSpec) -> Result<Collection> {
    if spec.count < 2 {
        return Err(Error::InvalidArgument(format!("a collection needs at least 2 shapes, got {}", spec.count)));
    }
    if !(spec.spread >= 0.0) || !spec.spread.is_finite() {
        return Err(Error::InvalidArgument(format!("spread must be finite and >= 0, got {}", spec.spread)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.spread;
    let (generator, codes, template) = match spec.family {
        Family::SphereRadius => {
            let gen = ImplicitGenerator::Sphere {
                center: Vec3::zeros(),
                radius0: 1.0,
                radius_gain: vec![1.0],
            };
            let last = (spec.count - 1) as f64;
            let codes = (0..spec.count)
                .map(|i| LatentCode::new(vec![0.5 * s * i as f64 / last]))
                .collect::<Result<Vec<_>>>()?;
            (gen, codes, mesh::shapes::icosphere(SPHERE_LEVEL, 1.0))
        }
        Family::EllipsoidAxes => {
            let gen = ImplicitGenerator::Ellipsoid {
                center: Vec3::zeros(),
                axes0: Vec3::repeat(1.0),
                axes_gain: vec![Vec3::x(), Vec3::y(), Vec3::z()],
            };
            let codes = codes_for(&mut rng, spec.count, &[0.3 * s; 3]);
            (gen, codes, mesh::shapes::icosphere(SPHERE_LEVEL, 1.0))
        }
        Family::BentCapsule => {
            let gen = ImplicitGenerator::CapsuleBlend {
                capsules: vec![Capsule {
                    a: Vec3::new(0.0, -1.0, 0.0),
                    b: Vec3::new(0.0, 1.0, 0.0),
                    radius: CAPSULE_RADIUS,
                }],
                smoothness: 0.05,
                warp: Warp::Arc(ArcWarp {
                    curvature0: 0.0,
                    curvature_gain: vec![BEND_GAIN, 0.0],
                    scale0: Vec3::repeat(1.0),
                    scale_gain: vec![Vec3::zeros(), Vec3::new(0.0, 0.3, 0.0)],
                    extent: Some(1.0),
                }),
            };
            let codes = codes_for(&mut rng, spec.count, &[s, 0.5 * s]);
            let tmpl = mesh::shapes::capsule(
                CAPSULE_RADIUS,
                -1.0,
                1.0,
                CAPSULE_AROUND,
                CAPSULE_CAP_RINGS,
                CAPSULE_BODY_RINGS,
            );
            (gen, codes, tmpl)
        }
        Family::BumpField => {
            let bumps = (0..BUMP_COUNT)
                .map(|_| Bump {
                    direction: unit_vector(&mut rng),
                    width: 0.5,
                    amplitude: 0.3,
                })
                .collect();
            let gen = ImplicitGenerator::RadialBump {
                center: Vec3::zeros(),
                radius0: 1.0,
                bumps,
            };
            let codes = codes_for(&mut rng, spec.count, &[0.5 * s; BUMP_COUNT]);
            (gen, codes, mesh::shapes::icosphere(SPHERE_LEVEL, 1.0))
        }
    };
    let meshes = codes
        .iter()
        .map(|z| {
            let moved = template
                .vertices()
                .iter()
                .map(|p| {
                    generator
                        .transport(p, &codes[0], z)?
                        .ok_or_else(|| Error::InvalidArgument("generator has no analytic transport".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            template.with_vertices(moved)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Collection {
        spec: spec.clone(),
        generator,
        codes,
        meshes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestShape {
    /// Relative to the manifest directory.
    pub mesh: PathBuf,
    pub code: LatentCode,
    /// Ground-truth correspondence from the template, if known.
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub family: Option<String>,
    pub seed: Option<u64>,
    /// Model units to reporting units, e.g. model-to-cm.
    pub scale: f64,
    pub units: String,
    pub template: usize,
    pub generator: Option<ImplicitGenerator>,
    pub shapes: Vec<ManifestShape>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::InvalidArgument(format!(
                "manifest version {} not supported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.shapes.is_empty() {
            return Err(Error::Empty("manifest shapes".into()));
        }
        if self.template >= self.shapes.len() {
            return Err(Error::IndexOutOfRange {
                index: self.template as i64,
                size: self.shapes.len(),
            });
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidArgument(format!("manifest scale must be > 0, got {}", self.scale)));
        }
        let d = self.shapes[0].code.dim();
        for s in &self.shapes {
            if s.code.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: s.code.dim(),
                });
            }
        }
        if let Some(g) = &self.generator {
            if g.latent_dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: g.latent_dim(),
                    got: d,
                });
            }
        }
        Ok(())
    }

    pub fn codes(&self) -> Vec<LatentCode> {
        self.shapes.iter().map(|s| s.code.clone()).collect()
    }

    pub fn load_meshes(&self, root: &Path) -> Result<Vec<TriMesh>> {
        self.shapes.iter().map(|s| mesh::load_mesh(root.join(&s.mesh))).collect()
    }

    /// One correspondence per shape; errors if any shape lacks ground truth.
    pub fn load_ground_truth(&self, root: &Path) -> Result<Vec<Correspondence>> {
        self.shapes
            .iter()
            .enumerate()
            .map(|(i, s)| match &s.gt {
                Some(p) => read_correspondences(root.join(p)),
                None => Err(Error::InvalidArgument(format!("shape {i} has no ground-truth correspondence"))),
            })
            .collect()
    }
}

/// Writes meshes, identity ground truth, and `manifest.json` into `dir`.
pub fn write_collection(col: &Collection, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut shapes = Vec::with_capacity(col.meshes.len());
    let n = col.meshes[0].n() as u32;
    let identity: Correspondence = (0..n).map(|v| (v, v)).collect();
    for (i, (m, z)) in col.meshes.iter().zip(&col.codes).enumerate() {
        let mesh_name = PathBuf::from(format!("shape_{i:03}.ply"));
        let gt_name = PathBuf::from(format!("gt_{i:03}.corr"));
        mesh::save_mesh(m, dir.join(&mesh_name), MeshFormat::PlyBinary)?;
        write_correspondences(&identity, dir.join(&gt_name), CorrFormat::Binary)?;
        shapes.push(ManifestShape {
            mesh: mesh_name,
            code: z.clone(),
            gt: Some(gt_name),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        family: Some(col.spec.family.name().to_string()),
        seed: Some(col.spec.seed),
        scale: 1.0,
        units: "model".into(),
        template: 0,
        generator: Some(col.generator.clone()),
        shapes,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
