//! Procedural meshes used as templates and test fixtures.

use std::collections::HashMap;

use rand::Rng;

use super::{TriMesh, Vec3};

pub fn tetrahedron() -> TriMesh {
    let v = vec![
        Vec3::new(1.0, 1.0, 1.0),
        Vec3::new(1.0, -1.0, -1.0),
        Vec3::new(-1.0, 1.0, -1.0),
        Vec3::new(-1.0, -1.0, 1.0),
    ];
    let f = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
    TriMesh::new(v, f).expect("static tetrahedron")
}

/// `nx * ny` vertex grid in the xy-plane with every quad split along the
/// same diagonal.
pub fn grid(nx: usize, ny: usize, spacing: f64) -> TriMesh {
    let mut v = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            v.push(Vec3::new(i as f64 * spacing, j as f64 * spacing, 0.0));
        }
    }
    let mut f = Vec::new();
    for j in 0..ny.saturating_sub(1) {
        for i in 0..nx.saturating_sub(1) {
            let a = j * nx + i;
            let b = a + 1;
            let c = a + nx;
            let d = c + 1;
            f.push([a, b, d]);
            f.push([a, d, c]);
        }
    }
    TriMesh::new(v, f).expect("grid indices are valid")
}

/// Subdivided icosahedron projected onto a sphere of the given radius.
/// Level `k` has `20 * 4^k` faces.
pub fn icosphere(level: usize, radius: f64) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut f: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mid = HashMap::<(usize, usize), usize>::new();
        let mut get_mid = |a: usize, b: usize, v: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                v.push(((v[a] + v[b]) * 0.5).normalize());
                v.len() - 1
            })
        };
        let mut nf = Vec::with_capacity(f.len() * 4);
        for [a, b, c] in f {
            let ab = get_mid(a, b, &mut v);
            let bc = get_mid(b, c, &mut v);
            let ca = get_mid(c, a, &mut v);
            nf.push([a, ab, ca]);
            nf.push([b, bc, ab]);
            nf.push([c, ca, bc]);
            nf.push([ab, bc, ca]);
        }
        f = nf;
    }
    for p in &mut v {
        *p *= radius;
    }
    TriMesh::new(v, f).expect("icosphere indices are valid")
}

/// Closed capsule around the segment `(0, y0, 0)-(0, y1, 0)`.
pub fn capsule(radius: f64, y0: f64, y1: f64, around: usize, cap_rings: usize, body_rings: usize) -> TriMesh {
    assert!(around >= 3 && cap_rings >= 1 && y1 >= y0);
    let mut rings: Vec<(f64, f64)> = Vec::new(); // (y, ring radius)
    // bottom cap, excluding the pole
    for k in 1..=cap_rings {
        let phi = std::f64::consts::FRAC_PI_2 * (k as f64) / (cap_rings as f64);
        rings.push((y0 - radius * phi.cos(), radius * phi.sin()));
    }
    for k in 1..body_rings {
        let s = k as f64 / body_rings as f64;
        rings.push((y0 + s * (y1 - y0), radius));
    }
    for k in (1..=cap_rings).rev() {
        let phi = std::f64::consts::FRAC_PI_2 * (k as f64) / (cap_rings as f64);
        rings.push((y1 + radius * phi.cos(), radius * phi.sin()));
    }
    let mut v = vec![Vec3::new(0.0, y0 - radius, 0.0)];
    for &(y, r) in &rings {
        for a in 0..around {
            let th = 2.0 * std::f64::consts::PI * a as f64 / around as f64;
            v.push(Vec3::new(r * th.cos(), y, -r * th.sin()));
        }
    }
    let top = v.len();
    v.push(Vec3::new(0.0, y1 + radius, 0.0));
    let idx = |ring: usize, a: usize| 1 + ring * around + (a % around);
    let mut f = Vec::new();
    for a in 0..around {
        f.push([0, idx(0, a + 1), idx(0, a)]);
    }
    for r in 0..rings.len() - 1 {
        for a in 0..around {
            let (p, q) = (idx(r, a), idx(r, a + 1));
            let (s, t) = (idx(r + 1, a), idx(r + 1, a + 1));
            f.push([p, q, t]);
            f.push([p, t, s]);
        }
    }
    let last = rings.len() - 1;
    for a in 0..around {
        f.push([top, idx(last, a), idx(last, a + 1)]);
    }
    TriMesh::new(v, f).expect("capsule indices are valid")
}

/// Random open surface: a jittered height-field grid with between
/// `nx * ny` vertices.
pub fn random_height_field<R: Rng>(rng: &mut R, nx: usize, ny: usize) -> TriMesh {
    let base = grid(nx, ny, 1.0 / (nx.max(ny) as f64));
    let v = base
        .vertices()
        .iter()
        .map(|p| {
            Vec3::new(
                p.x + rng.gen_range(-0.02..0.02),
                p.y + rng.gen_range(-0.02..0.02),
                rng.gen_range(-0.15..0.15),
            )
        })
        .collect();
    base.with_vertices(v).expect("same vertex count")
}

/// Icosphere with every vertex pushed radially by a random factor.
pub fn random_blob<R: Rng>(rng: &mut R, level: usize) -> TriMesh {
    let base = icosphere(level, 1.0);
    let v = base
        .vertices()
        .iter()
        .map(|p| p * rng.gen_range(0.8..1.2))
        .collect();
    base.with_vertices(v).expect("same vertex count")
}
