use super::*;
use crate::energy::{build_acap, build_combined, DEFAULT_ALPHA};
use crate::implicit::Bump;
use crate::mesh::shapes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sphere_gen() -> ImplicitGenerator {
    ImplicitGenerator::Sphere {
        center: Vec3::zeros(),
        radius0: 0.0,
        radius_gain: vec![1.0],
    }
}

fn translated(u: Vec3) -> ImplicitGenerator {
    ImplicitGenerator::Translated {
        inner: Box::new(ImplicitGenerator::Sphere {
            center: Vec3::zeros(),
            radius0: 1.0,
            radius_gain: vec![],
        }),
        inner_code: LatentCode::zeros(0),
        shift: vec![u],
    }
}

fn ellipsoid_gen() -> ImplicitGenerator {
    ImplicitGenerator::Ellipsoid {
        center: Vec3::zeros(),
        axes0: Vec3::new(1.0, 0.9, 1.1),
        axes_gain: vec![Vec3::new(0.3, 0.0, 0.0), Vec3::new(0.0, 0.1, 0.25)],
    }
}

/// Icosphere mapped exactly onto the ellipsoid level set at `z`.
fn ellipsoid_mesh(gen: &ImplicitGenerator, z: &LatentCode, level: usize) -> TriMesh {
    let ImplicitGenerator::Ellipsoid { axes0, axes_gain, .. } = gen else { unreachable!() };
    let a = axes_gain
        .iter()
        .zip(z.as_slice())
        .fold(*axes0, |acc, (g, v)| acc + g * *v);
    shapes::icosphere(level, 1.0).transformed(|p| p.component_mul(&a)).unwrap()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn sphere_constraint_rows() {
    let mesh = shapes::icosphere(1, 1.0);
    let z = LatentCode::new(vec![1.0]).unwrap();
    let cs = build_constraints(&sphere_gen(), &mesh, &z).unwrap();
    assert_eq!(cs.n_rows(), mesh.n());
    for r in 0..cs.n_rows() {
        let p = mesh.vertices()[cs.row_vertices()[r]];
        assert!((cs.normal(r) - p).norm() < 1e-12);
        assert_eq!(cs.latent_gradients()[(r, 0)], -1.0);
    }
    let c = cs.dense_c();
    for r in 0..cs.n_rows() {
        let i = cs.row_vertices()[r];
        for col in 0..c.ncols() {
            if col / 3 != i {
                assert_eq!(c[(r, col)], 0.0);
            }
        }
    }
}

#[test]
fn translation_constraint_rows() {
    let u = Vec3::new(0.3, -0.5, 0.2);
    let g = translated(u);
    let mesh = shapes::icosphere(1, 1.0);
    let cs = build_constraints(&g, &mesh, &LatentCode::zeros(1)).unwrap();
    for r in 0..cs.n_rows() {
        let n = cs.normal(r);
        assert!((cs.latent_gradients()[(r, 0)] + n.dot(&u)).abs() < 1e-14);
    }
}

#[test]
fn degenerate_normals_dropped() {
    // vertex at the sphere center has no gradient
    let mut v = shapes::icosphere(1, 1.0).vertices().to_vec();
    v.push(Vec3::zeros());
    let mut f = shapes::icosphere(1, 1.0).faces().to_vec();
    f.push([0, 1, v.len() - 1]);
    let mesh = TriMesh::new(v, f).unwrap();
    let z = LatentCode::new(vec![1.0]).unwrap();
    let cs = build_constraints(&sphere_gen(), &mesh, &z).unwrap();
    assert_eq!(cs.dropped_vertices(), &[mesh.n() - 1]);
    let form = build_combined(&mesh, DEFAULT_ALPHA).unwrap();
    let field = solve_displacement(&form, &cs, &[1.0], 1e-3, None).unwrap();
    assert_eq!(field.diagnostics.dropped_constraints, 1);

    let only_center = TriMesh::with_edges(vec![Vec3::zeros(), Vec3::zeros()], vec![], vec![[0, 1]]).unwrap();
    assert!(matches!(
        build_constraints(&sphere_gen(), &only_center, &z),
        Err(Error::DegenerateConstraints(2))
    ));
}

#[test]
fn zero_direction_gives_zero_field() {
    let mesh = shapes::icosphere(2, 1.0);
    let z = LatentCode::new(vec![1.0]).unwrap();
    let cs = build_constraints(&sphere_gen(), &mesh, &z).unwrap();
    let form = build_combined(&mesh, DEFAULT_ALPHA).unwrap();
    let f = solve_displacement(&form, &cs, &[0.0], 1e-3, None).unwrap();
    assert!(f.d.iter().all(|&x| x == 0.0));
}

fn radial_deviation(level: usize, alpha: f64) -> f64 {
    let mesh = shapes::icosphere(level, 1.0);
    let z = LatentCode::new(vec![1.0]).unwrap();
    let cs = build_constraints(&sphere_gen(), &mesh, &z).unwrap();
    let form = build_combined(&mesh, alpha).unwrap();
    let eps = 1e-3;
    let f = solve_displacement(&form, &cs, &[1.0], eps, None).unwrap();
    mesh.vertices()
        .iter()
        .enumerate()
        .map(|(i, p)| (Vec3::new(f.d[3 * i], f.d[3 * i + 1], f.d[3 * i + 2]) - p * eps).norm())
        .fold(0.0, f64::max)
        / eps
}

#[test]
fn sphere_field_is_radial() {
    let dev = radial_deviation(3, 0.0);
    assert!(dev <= 0.02, "max deviation {dev}");
}

#[test]
fn rigid_term_bends_sphere_field() {
    // expansion is not rigid, so irregular meshes trade some normal motion for tangential slip
    let dev = radial_deviation(3, DEFAULT_ALPHA);
    assert!(dev > 0.0 && dev < 0.05, "{dev}");
}

#[test]
fn matches_dense_kkt_and_satisfies_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gen = ellipsoid_gen();
    for _ in 0..3 {
        let mesh = shapes::random_blob(&mut rng, 2);
        let z = LatentCode::new(vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).unwrap();
        let cs = build_constraints(&gen, &mesh, &z).unwrap();
        let form = build_combined(&mesh, DEFAULT_ALPHA).unwrap();
        let mu = default_mu(&form);
        let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let eps = 1e-3;
        let f = solve_displacement(&form, &cs, &v, eps, Some(mu)).unwrap();
        let (d_ref, lam_ref) = solve_displacement_dense(&form, &cs, &v, eps, mu).unwrap();
        let diff: Vec<f64> = f.d.iter().zip(&d_ref).map(|(a, b)| a - b).collect();
        assert!(norm(&diff) <= 1e-8 * norm(&d_ref), "{} vs {}", norm(&diff), norm(&d_ref));
        let dl: Vec<f64> = f.multipliers.iter().zip(&lam_ref).map(|(a, b)| a - b).collect();
        assert!(norm(&dl) <= 1e-6 * norm(&lam_ref).max(1e-300));
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(f.diagnostics.constraint_residual <= 1e-6 * eps * vn);
        assert!(f.diagnostics.kkt_residual <= 1e-6 * f.diagnostics.kkt_scale);
    }
}

#[test]
fn feasible_perturbations_do_not_improve() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gen = ellipsoid_gen();
    let z = LatentCode::new(vec![0.2, 0.4]).unwrap();
    let mesh = ellipsoid_mesh(&gen, &z, 2);
    let cs = build_constraints(&gen, &mesh, &z).unwrap();
    let form = build_combined(&mesh, DEFAULT_ALPHA).unwrap();
    let solver = InducedSolver::new(&form, &cs, default_mu(&form)).unwrap();
    let f = solver.solve(&[0.7, -0.3], 1e-3).unwrap();
    let objective = |d: &[f64]| form.matrix().quad_form(d) + solver.mu() * d.iter().map(|x| x * x).sum::<f64>();
    let base = objective(&f.d);
    let scale = norm(&f.d) / (mesh.n() as f64).sqrt();
    for _ in 0..20 {
        let mut d = f.d.clone();
        for i in 0..mesh.n() {
            let mut delta = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale;
            if let Some(r) = solver.row_of(i) {
                let n = cs.normal(r).normalize();
                delta -= n * n.dot(&delta);
            }
            for a in 0..3 {
                d[3 * i + a] += delta[a];
            }
        }
        assert!(cs.constraint_residual(&d, &[0.7, -0.3], 1e-3).unwrap() <= 1e-12);
        assert!(base <= objective(&d) + 1e-9);
    }
}

#[test]
fn linear_in_direction_and_step() {
    let gen = ellipsoid_gen();
    let z = LatentCode::new(vec![0.5, 0.1]).unwrap();
    let mesh = ellipsoid_mesh(&gen, &z, 2);
    let cs = build_constraints(&gen, &mesh, &z).unwrap();
    let form = build_combined(&mesh, DEFAULT_ALPHA).unwrap();
    let solver = InducedSolver::new(&form, &cs, default_mu(&form)).unwrap();
    let (v1, v2) = ([1.0, 0.5], [-0.3, 2.0]);
    let (a, b) = (0.7, -1.3);
    let d1 = solver.solve(&v1, 1e-3).unwrap().d;
    let d2 = solver.solve(&v2, 1e-3).unwrap().d;
    let comb = [a * v1[0] + b * v2[0], a * v1[1] + b * v2[1]];
    let d12 = solver.solve(&comb, 1e-3).unwrap().d;
    let diff: Vec<f64> = (0..d12.len()).map(|k| d12[k] - a * d1[k] - b * d2[k]).collect();
    assert!(norm(&diff) <= 1e-8 * norm(&d12));
    let dd = solver.solve(&v1, 2e-3).unwrap().d;
    let diff: Vec<f64> = (0..dd.len()).map(|k| dd[k] - 2.0 * d1[k]).collect();
    assert!(norm(&diff) <= 1e-12 * norm(&dd));

    let g = solver.transfer_operator().unwrap();
    let via_g = g.apply(&comb, 1e-3).unwrap();
    let diff: Vec<f64> = via_g.iter().zip(&d12).map(|(a, b)| a - b).collect();
    assert!(norm(&diff) <= 1e-8 * norm(&d12));
}

#[test]
fn translation_family_moves_rigidly() {
    let u = Vec3::new(0.3, -0.5, 0.2);
    let gen = translated(u);
    let mesh = shapes::icosphere(2, 1.0);
    let z = LatentCode::zeros(1);
    let cs = build_constraints(&gen, &mesh, &z).unwrap();
    let form = build_combined(&mesh, DEFAULT_ALPHA).unwrap();
    let spread = |mu: f64| {
        let g = transfer_operator(&form, &cs, Some(mu)).unwrap();
        let col = g.matrix().column(0);
        // d = -eps G v equals eps u v
        (0..mesh.n())
            .map(|i| (Vec3::new(col[3 * i], col[3 * i + 1], col[3 * i + 2]) + u).norm())
            .fold(0.0, f64::max)
    };
    assert!(spread(0.0) <= 1e-6 * u.norm());
    // the regularizer pulls toward the normal-only field at first order in mu
    let mu = default_mu(&form);
    let (a, b) = (spread(mu), spread(mu / 10.0));
    assert!((a / b - 10.0).abs() <= 1.0, "{a} {b}");
    let rep = r_geo(&form, &cs, &GeoOptions::default()).unwrap();
    assert!(rep.value >= 0.0 && rep.value <= 1e-10, "{}", rep.value);
}

#[test]
fn sphere_family_is_conformal() {
    let mesh = shapes::icosphere(3, 1.0);
    let z = LatentCode::new(vec![1.0]).unwrap();
    let cs = build_constraints(&sphere_gen(), &mesh, &z).unwrap();
    let form = build_combined(&mesh, 0.0).unwrap();
    let rep = r_geo(&form, &cs, &GeoOptions::default()).unwrap();
    assert!(rep.value <= 1e-8, "{}", rep.value);
    // rigid-only energy penalizes the expansion
    let arap = crate::energy::build_arap(&mesh);
    let rep = r_geo(&arap, &cs, &GeoOptions::default()).unwrap();
    assert!(rep.value > 1e-3);
    assert_eq!(build_acap(&mesh).matrix(), form.matrix());
}

fn bump_gen(dim: usize, rng: &mut ChaCha8Rng) -> ImplicitGenerator {
    // well separated narrow bumps on a golden-angle spiral
    let bumps = (0..dim)
        .map(|k| {
            let y = 1.0 - 2.0 * (k as f64 + 0.5) / dim as f64;
            let r = (1.0 - y * y).sqrt();
            let th = k as f64 * std::f64::consts::PI * (3.0 - 5f64.sqrt());
            Bump {
                direction: Vec3::new(r * th.cos(), y, r * th.sin()),
                width: rng.gen_range(0.25..0.35),
                amplitude: rng.gen_range(0.05..0.15),
            }
        })
        .collect();
    ImplicitGenerator::RadialBump {
        center: Vec3::zeros(),
        radius0: 1.0,
        bumps,
    }
}

#[test]
fn hutchinson_close_to_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gen = bump_gen(8, &mut rng);
    let z = LatentCode::zeros(8);
    let mesh = shapes::icosphere(2, 1.0);
    let cs = build_constraints(&gen, &mesh, &z).unwrap();
    let form = build_combined(&mesh, DEFAULT_ALPHA).unwrap();
    let solver = InducedSolver::new(&form, &cs, default_mu(&form)).unwrap();
    let exact = trace_e(&solver, TraceMode::Exact).unwrap();
    let est = trace_e(&solver, TraceMode::Hutchinson { probes: 64, seed: 1 }).unwrap();
    assert!((est - exact).abs() <= 0.05 * exact, "{est} vs {exact}");
    // the regularized operator is within O(mu) of the limit
    let g = solver.transfer_operator().unwrap();
    assert!((g.gram(form.matrix()).trace() - exact).abs() <= 1e-3 * exact);
    let by_columns: f64 = (0..8)
        .map(|k| {
            let rhs = cs.rhs(LatentCode::basis(8, k).as_slice(), 1.0).unwrap();
            form.matrix().quad_form(&solver.solve_rhs_limit(&rhs).unwrap())
        })
        .sum();
    assert!((by_columns - exact).abs() <= 1e-12 * exact);
}

#[test]
fn cycle_residual_translation_is_negligible() {
    let gen = translated(Vec3::new(0.2, 0.1, -0.4));
    let mesh = shapes::icosphere(2, 1.0);
    let rep = cycle_residual(&gen, &mesh, &LatentCode::zeros(1), 0, &CycleOptions::default()).unwrap();
    assert!(rep.residual <= 1e-6 * rep.g_norm_sq, "{rep:?}");
}

#[test]
fn cycle_residual_ellipsoid_richardson() {
    let gen = ellipsoid_gen();
    let z = LatentCode::new(vec![0.3, 0.2]).unwrap();
    let mesh = ellipsoid_mesh(&gen, &z, 2);
    let opts = CycleOptions::default();
    let coarse = cycle_residual(&gen, &mesh, &z, 0, &opts).unwrap();
    let fine = cycle_residual(
        &gen,
        &mesh,
        &z,
        0,
        &CycleOptions {
            eps_cyc: opts.eps_cyc / 2.0,
            ..opts
        },
    )
    .unwrap();
    assert!(coarse.residual > 0.0 && fine.residual > 0.0);
    assert!(fine.residual < coarse.residual);
    // normalized by eps_cyc^2 both approximate the same directional derivative
    let a = coarse.residual / (opts.eps_cyc * opts.eps_cyc);
    let b = fine.residual / (opts.eps_cyc * opts.eps_cyc / 4.0);
    assert!((a - b).abs() <= 0.1 * b, "{a} vs {b}");
}

#[test]
fn three_cycle_is_second_order() {
    let gen = ellipsoid_gen();
    let z = LatentCode::new(vec![0.3, 0.2]).unwrap();
    let mesh = ellipsoid_mesh(&gen, &z, 2);
    let (v, v2) = ([0.6, -0.2], [-0.1, 0.8]);
    let r1 = norm(&three_cycle_residual(&gen, &mesh, &z, &v, &v2, 1e-3, DEFAULT_ALPHA, None).unwrap());
    let r2 = norm(&three_cycle_residual(&gen, &mesh, &z, &v, &v2, 2e-3, DEFAULT_ALPHA, None).unwrap());
    let ratio = r2 / r1;
    assert!((ratio - 4.0).abs() <= 0.8, "ratio {ratio}");
}

#[test]
fn advect_sphere_to_larger_radius() {
    let gen = sphere_gen();
    let mut mesh = shapes::icosphere(2, 1.0);
    let mut z = LatentCode::new(vec![1.0]).unwrap();
    for _ in 0..10 {
        let (m, z1, diag) = advect(&gen, &mesh, &z, &[1.0], 1e-3, &AdvectOptions::default()).unwrap();
        assert!(!diag.min_norm_fallback);
        mesh = m;
        z = z1;
    }
    assert!((z.as_slice()[0] - 1.01).abs() < 1e-12);
    for p in mesh.vertices() {
        assert!((p.norm() - 1.01).abs() <= 1e-4);
    }
    let (same, _, _) = advect(&gen, &mesh, &z, &[0.0], 1e-3, &AdvectOptions::default()).unwrap();
    assert_eq!(same.vertices(), mesh.vertices());
}

#[test]
fn advect_with_projection_tracks_level_set() {
    let gen = ellipsoid_gen();
    let z0 = LatentCode::new(vec![0.0, 0.0]).unwrap();
    let z1 = LatentCode::new(vec![0.5, 0.4]).unwrap();
    let mut mesh = ellipsoid_mesh(&gen, &z0, 2);
    let steps = 20;
    let dir: Vec<f64> = z1.as_slice().iter().zip(z0.as_slice()).map(|(a, b)| a - b).collect();
    let len = norm(&dir);
    let v: Vec<f64> = dir.iter().map(|x| x / len).collect();
    let eps = len / steps as f64;
    let mut z = z0.clone();
    let opts = AdvectOptions {
        project: true,
        ..AdvectOptions::default()
    };
    for _ in 0..steps {
        let (m, zn, _) = advect(&gen, &mesh, &z, &v, eps, &opts).unwrap();
        mesh = m;
        z = zn;
    }
    for p in mesh.vertices() {
        assert!(gen.eval(p, &z1).unwrap().abs() <= 5e-3);
    }
}

#[test]
fn scale_covariance() {
    let s = 2.5;
    let mesh = shapes::random_blob(&mut ChaCha8Rng::seed_from_u64(2), 2);
    let big = mesh.transformed(|p| p * s).unwrap();
    let gen = ImplicitGenerator::Sphere {
        center: Vec3::zeros(),
        radius0: 0.2,
        radius_gain: vec![1.0],
    };
    let gen_big = ImplicitGenerator::Sphere {
        center: Vec3::zeros(),
        radius0: 0.2 * s,
        radius_gain: vec![s],
    };
    let z = LatentCode::new(vec![0.8]).unwrap();
    let form = build_combined(&mesh, DEFAULT_ALPHA).unwrap();
    let form_big = build_combined(&big, DEFAULT_ALPHA).unwrap();
    let mu = default_mu(&form);
    let d = solve_displacement(&form, &build_constraints(&gen, &mesh, &z).unwrap(), &[1.0], 1e-3, Some(mu)).unwrap();
    let db = solve_displacement(&form_big, &build_constraints(&gen_big, &big, &z).unwrap(), &[1.0], 1e-3, Some(mu)).unwrap();
    let diff: Vec<f64> = db.d.iter().zip(&d.d).map(|(a, b)| a - s * b).collect();
    assert!(norm(&diff) <= 1e-8 * norm(&db.d));
}

#[test]
fn limit_solve_matches_unregularized_oracle() {
    let gen = ellipsoid_gen();
    let z = LatentCode::new(vec![0.2, 0.3]).unwrap();
    let mesh = ellipsoid_mesh(&gen, &z, 1);
    let cs = build_constraints(&gen, &mesh, &z).unwrap();
    let form = build_combined(&mesh, DEFAULT_ALPHA).unwrap();
    let solver = InducedSolver::new(&form, &cs, default_mu(&form)).unwrap();
    let rhs = cs.rhs(&[1.0, -0.5], 1e-3).unwrap();
    let limit = solver.solve_rhs_limit(&rhs).unwrap();
    let exact = InducedSolver::new(&form, &cs, 0.0).unwrap().solve_rhs(&rhs).unwrap();
    let diff: Vec<f64> = limit.iter().zip(&exact).map(|(a, b)| a - b).collect();
    assert!(norm(&diff) <= 1e-8 * norm(&exact), "{}", norm(&diff) / norm(&exact));
}

#[test]
fn stable_under_smaller_mu() {
    let gen = ellipsoid_gen();
    let z = LatentCode::new(vec![0.1, 0.6]).unwrap();
    let mesh = ellipsoid_mesh(&gen, &z, 2);
    let cs = build_constraints(&gen, &mesh, &z).unwrap();
    let form = build_combined(&mesh, DEFAULT_ALPHA).unwrap();
    let mu = default_mu(&form);
    let a = solve_displacement(&form, &cs, &[1.0, 1.0], 1e-3, Some(mu)).unwrap();
    let b = solve_displacement(&form, &cs, &[1.0, 1.0], 1e-3, Some(mu / 10.0)).unwrap();
    let diff: Vec<f64> = a.d.iter().zip(&b.d).map(|(x, y)| x - y).collect();
    assert!(norm(&diff) <= 1e-3 * norm(&a.d));
}

#[test]
fn zero_mu_falls_back_to_min_norm() {
    // rotations about the sphere center are free and tangential
    let mesh = shapes::icosphere(1, 1.0);
    let z = LatentCode::new(vec![1.0]).unwrap();
    let cs = build_constraints(&sphere_gen(), &mesh, &z).unwrap();
    let form = crate::energy::build_arap(&mesh);
    let f = solve_displacement(&form, &cs, &[1.0], 1e-3, Some(0.0)).unwrap();
    assert!(f.diagnostics.min_norm_fallback);
    assert!(f.diagnostics.constraint_residual <= 1e-9 * 1e-3);
    for (i, p) in mesh.vertices().iter().enumerate() {
        let di = Vec3::new(f.d[3 * i], f.d[3 * i + 1], f.d[3 * i + 2]);
        assert!((di - p * 1e-3).norm() <= 1e-9);
    }
}

#[test]
fn ball_volumes() {
    use std::f64::consts::PI;
    assert_eq!(ball_volume(1), 2.0);
    assert!((ball_volume(2) - PI).abs() < 1e-15);
    assert!((ball_volume(3) - 4.0 * PI / 3.0).abs() < 1e-14);
    assert!((ball_volume(4) - PI * PI / 2.0).abs() < 1e-14);
}

#[test]
fn trace_mode_parsing() {
    assert_eq!("exact".parse::<TraceMode>().unwrap(), TraceMode::Exact);
    assert_eq!(
        "hutchinson:16".parse::<TraceMode>().unwrap(),
        TraceMode::Hutchinson { probes: 16, seed: 0 }
    );
    assert!("hutchinson:0".parse::<TraceMode>().is_err());
    assert!("median".parse::<TraceMode>().is_err());
    assert_eq!(TraceMode::auto(64), TraceMode::Exact);
    assert!(matches!(TraceMode::auto(65), TraceMode::Hutchinson { .. }));
}

#[test]
fn diagnostics_serialize() {
    let mesh = shapes::icosphere(1, 1.0);
    let z = LatentCode::new(vec![1.0]).unwrap();
    let cs = build_constraints(&sphere_gen(), &mesh, &z).unwrap();
    let form = build_combined(&mesh, DEFAULT_ALPHA).unwrap();
    let f = solve_displacement(&form, &cs, &[1.0], 1e-3, None).unwrap();
    let json = serde_json::to_value(&f.diagnostics).unwrap();
    for key in ["dropped_constraints", "kkt_residual", "objective", "mu"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

