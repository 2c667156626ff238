use std::path::PathBuf;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use shapecorr::implicit::{
    fit_mlp, load_mlp_weights, marching_cubes, save_mlp_weights, Activation, FitConfig, FitSample, ImplicitGenerator,
    LatentCode, Mlp, VoxelGrid,
};
use shapecorr::induced::{build_constraints, DEFAULT_EPSILON};
use shapecorr::mesh::Vec3;

/// Set to regenerate the golden files after an intentional change.
const BLESS_VAR: &str = "SHAPECORR_BLESS";

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

#[derive(Serialize, Deserialize)]
struct GoldenPoint {
    x: [f64; 3],
    z: Vec<f64>,
    /// IEEE-754 bits of the value and gradients, so equality is exact.
    value: u64,
    grad_x: [u64; 3],
    grad_z: Vec<u64>,
}

fn probe(net: &Mlp, x: [f64; 3], z: Vec<f64>) -> GoldenPoint {
    let gen = ImplicitGenerator::Mlp(net.clone());
    let s = gen.sample(&Vec3::from(x), &LatentCode::new(z.clone()).unwrap()).unwrap();
    GoldenPoint {
        x,
        z,
        value: s.value.to_bits(),
        grad_x: [s.grad_x.x.to_bits(), s.grad_x.y.to_bits(), s.grad_x.z.to_bits()],
        grad_z: s.grad_z.iter().map(|g| g.to_bits()).collect(),
    }
}

#[test]
fn fixed_weights_reproduce_golden_values() {
    let (weights, golden) = (data("mlp_weights.json"), data("mlp_golden.json"));
    if std::env::var_os(BLESS_VAR).is_some() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::random(&mut rng, 3, &[16, 16], Activation::Softplus, 1.0);
        save_mlp_weights(&net, &weights).unwrap();
        let net = load_mlp_weights(&weights).unwrap();
        let points: Vec<GoldenPoint> = (0..16)
            .map(|_| {
                let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let z = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                probe(&net, x, z)
            })
            .collect();
        std::fs::write(&golden, serde_json::to_string_pretty(&points).unwrap()).unwrap();
    }
    let net = load_mlp_weights(&weights).unwrap();
    let points: Vec<GoldenPoint> = serde_json::from_str(&std::fs::read_to_string(&golden).unwrap()).unwrap();
    assert!(!points.is_empty());
    for p in points {
        let again = probe(&net, p.x, p.z.clone());
        assert_eq!(again.value, p.value, "value at {:?}", p.x);
        assert_eq!(again.grad_x, p.grad_x, "grad_x at {:?}", p.x);
        assert_eq!(again.grad_z, p.grad_z, "grad_z at {:?}", p.x);
    }
}

fn fitted_sphere() -> Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net = Mlp::random(&mut rng, 1, &[32, 32], Activation::Softplus, 1.0);
    let samples: Vec<FitSample> = (0..4000)
        .map(|_| {
            let x = Vec3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            let r = rng.gen_range(0.7..1.3);
            FitSample {
                x,
                z: vec![r],
                target: x.norm() - r,
            }
        })
        .collect();
    let cfg = FitConfig {
        steps: 3000,
        batch_size: 256,
        learning_rate: 3e-3,
        seed: 1,
    };
    fit_mlp(&mut net, &samples, &cfg).unwrap();
    net
}

#[test]
fn fitted_sphere_admits_the_radial_field() {
    let gen = ImplicitGenerator::Mlp(fitted_sphere());
    let z = LatentCode::new(vec![1.0]).unwrap();
    let grid = VoxelGrid::cube(Vec3::zeros(), 1.5, 32).unwrap();
    let mesh = marching_cubes(&gen, &z, &grid).unwrap().mesh;
    let cs = build_constraints(&gen, &mesh, &z).unwrap();
    let eps = DEFAULT_EPSILON;
    // growing the radius by eps moves every point eps along its radius
    let radial: Vec<f64> = mesh
        .vertices()
        .iter()
        .flat_map(|p| (p.normalize() * eps).as_slice().to_vec())
        .collect();
    let rhs = cs.rhs(&[1.0], eps).unwrap();
    let residual = |d: Vec<f64>| {
        let cd = cs.dense_c() * DVector::from_vec(d);
        cd.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let fitted = residual(radial);
    assert!(fitted <= 1e-3, "{fitted}");
    // the check can tell a wrong field apart
    let still = residual(vec![0.0; 3 * mesh.n()]);
    assert!(fitted < 0.25 * still, "{fitted} vs {still}");
}
