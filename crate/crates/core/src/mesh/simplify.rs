//! Quadric-error-metric edge-collapse simplification (Garland & Heckbert).
//!
//! Boundary edges get a heavily weighted perpendicular plane quadric so that
//! open borders (e.g. from clipped marching-cubes grids) stay in place.
//! Collapses that would break the link condition, duplicate a face or flip a
//! surviving face are rejected.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use nalgebra::{Matrix3, Matrix4, Vector4};

use super::{TriMesh, Vec3};
use crate::error::Result;

const BOUNDARY_WEIGHT: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimplifyReport {
    pub faces_before: usize,
    pub faces_after: usize,
    pub collapses: usize,
    /// False when no further valid collapse existed before reaching the
    /// target; the best achievable mesh is returned.
    pub reached_target: bool,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    cost: f64,
    u: usize,
    v: usize,
    stamp_u: u32,
    stamp_v: u32,
    pos: Vec3,
}

impl PartialEq for Candidate {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl Ord for Candidate {
    fn cmp(&self, o: &Self) -> Ordering {
        o.cost
            .total_cmp(&self.cost)
            .then_with(|| (o.u, o.v).cmp(&(self.u, self.v)))
    }
}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

fn plane_quadric(n: &Vec3, p: &Vec3, w: f64) -> Matrix4<f64> {
    let plane = Vector4::new(n.x, n.y, n.z, -n.dot(p));
    plane * plane.transpose() * w
}

fn quadric_cost(q: &Matrix4<f64>, p: &Vec3) -> f64 {
    let h = Vector4::new(p.x, p.y, p.z, 1.0);
    (h.transpose() * q * h)[0].max(0.0)
}

struct State {
    pos: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    face_alive: Vec<bool>,
    vert_faces: Vec<Vec<usize>>,
    quadric: Vec<Matrix4<f64>>,
    stamp: Vec<u32>,
    alive_faces: usize,
}

impl State {
    fn neighbors(&self, v: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.vert_faces[v]
            .iter()
            .flat_map(|&f| self.faces[f])
            .filter(|&w| w != v)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn candidate(&self, u: usize, v: usize) -> Candidate {
        let (u, v) = (u.min(v), u.max(v));
        let q = self.quadric[u] + self.quadric[v];
        let a: Matrix3<f64> = q.fixed_view::<3, 3>(0, 0).into();
        let b = -Vec3::new(q[(0, 3)], q[(1, 3)], q[(2, 3)]);
        let mut choices = vec![self.pos[u], self.pos[v], (self.pos[u] + self.pos[v]) * 0.5];
        let scale = a.norm().max(1e-300);
        if a.determinant().abs() > 1e-12 * scale * scale * scale {
            if let Some(inv) = a.try_inverse() {
                let p = inv * b;
                if p.iter().all(|c| c.is_finite()) {
                    choices.insert(0, p);
                }
            }
        }
        let (pos, cost) = choices
            .into_iter()
            .map(|p| (p, quadric_cost(&q, &p)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        Candidate {
            cost,
            u,
            v,
            stamp_u: self.stamp[u],
            stamp_v: self.stamp[v],
            pos,
        }
    }

    fn valid(&self, c: &Candidate) -> bool {
        let (u, v) = (c.u, c.v);
        let shared: Vec<usize> = self.vert_faces[u]
            .iter()
            .copied()
            .filter(|f| self.faces[*f].contains(&v))
            .collect();
        if shared.is_empty() {
            return false;
        }
        // link condition
        let nu = self.neighbors(u);
        let nv = self.neighbors(v);
        let common = nu.iter().filter(|w| nv.binary_search(w).is_ok()).count();
        if common != shared.len() {
            return false;
        }
        if self.alive_faces - shared.len() < 2 {
            return false;
        }
        // resulting faces: orientation and uniqueness
        let mut seen = BTreeMap::new();
        for &f in self.vert_faces[u].iter().chain(&self.vert_faces[v]) {
            if shared.contains(&f) {
                continue;
            }
            let old = self.faces[f];
            let new = old.map(|w| if w == v { u } else { w });
            let mut key = new;
            key.sort_unstable();
            if seen.insert(key, f).is_some_and(|g| g != f) {
                return false;
            }
            let p = |w: usize| if w == u || w == v { c.pos } else { self.pos[w] };
            let n_old = (self.pos[old[1]] - self.pos[old[0]]).cross(&(self.pos[old[2]] - self.pos[old[0]]));
            let n_new = (p(new[1]) - p(new[0])).cross(&(p(new[2]) - p(new[0])));
            if n_new.dot(&n_old) <= 1e-3 * n_old.norm() * n_new.norm() || n_new.norm() == 0.0 {
                return false;
            }
        }
        true
    }

    fn collapse(&mut self, c: &Candidate) {
        let (u, v) = (c.u, c.v);
        for f in std::mem::take(&mut self.vert_faces[v]) {
            if !self.face_alive[f] {
                continue;
            }
            if self.faces[f].contains(&u) {
                self.face_alive[f] = false;
                self.alive_faces -= 1;
                for w in self.faces[f] {
                    if w != v {
                        self.vert_faces[w].retain(|&g| g != f);
                    }
                }
            } else {
                for w in self.faces[f].iter_mut() {
                    if *w == v {
                        *w = u;
                    }
                }
                self.vert_faces[u].push(f);
            }
        }
        self.vert_faces[u].sort_unstable();
        self.pos[u] = c.pos;
        self.quadric[u] = self.quadric[u] + self.quadric[v];
        self.stamp[u] += 1;
        self.stamp[v] += 1;
    }
}

/// Collapses edges until the face count is at most `target_faces`.
pub fn simplify(mesh: &TriMesh, target_faces: usize) -> Result<(TriMesh, SimplifyReport)> {
    let target_faces = target_faces.max(4);
    let before = mesh.faces().len();
    if before <= target_faces {
        return Ok((
            mesh.clone(),
            SimplifyReport {
                faces_before: before,
                faces_after: before,
                collapses: 0,
                reached_target: true,
            },
        ));
    }
    let n = mesh.n();
    let mut st = State {
        pos: mesh.vertices().to_vec(),
        faces: mesh.faces().to_vec(),
        face_alive: vec![true; before],
        vert_faces: vec![Vec::new(); n],
        quadric: vec![Matrix4::zeros(); n],
        stamp: vec![0; n],
        alive_faces: before,
    };
    for (fi, f) in mesh.faces().iter().enumerate() {
        let nrm = mesh.face_normal(fi);
        let area2 = nrm.norm();
        for &w in f {
            st.vert_faces[w].push(fi);
        }
        if area2 > 0.0 {
            let q = plane_quadric(&(nrm / area2), &mesh.vertices()[f[0]], area2 * 0.5);
            for &w in f {
                st.quadric[w] += q;
            }
        }
    }
    // boundary constraint planes
    let mut edge_faces = BTreeMap::<(usize, usize), Vec<usize>>::new();
    for (fi, f) in mesh.faces().iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            edge_faces.entry((a.min(b), a.max(b))).or_default().push(fi);
        }
    }
    for (&(a, b), fs) in &edge_faces {
        if fs.len() == 1 {
            let fnrm = mesh.face_normal(fs[0]);
            let e = mesh.vertices()[b] - mesh.vertices()[a];
            let m = e.cross(&fnrm);
            let l = m.norm();
            if l > 0.0 {
                let q = plane_quadric(&(m / l), &mesh.vertices()[a], BOUNDARY_WEIGHT * e.norm_squared());
                st.quadric[a] += q;
                st.quadric[b] += q;
            }
        }
    }

    let mut heap = BinaryHeap::new();
    for &(a, b) in edge_faces.keys() {
        heap.push(st.candidate(a, b));
    }
    let mut collapses = 0;
    while st.alive_faces > target_faces {
        let Some(c) = heap.pop() else { break };
        if c.stamp_u != st.stamp[c.u] || c.stamp_v != st.stamp[c.v] {
            continue;
        }
        if !st.valid(&c) {
            continue;
        }
        st.collapse(&c);
        collapses += 1;
        for w in st.neighbors(c.u) {
            heap.push(st.candidate(c.u, w));
        }
    }

    // compact
    let mut remap = vec![usize::MAX; n];
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (fi, f) in st.faces.iter().enumerate() {
        if !st.face_alive[fi] {
            continue;
        }
        let nf = f.map(|w| {
            if remap[w] == usize::MAX {
                remap[w] = verts.len();
                verts.push(st.pos[w]);
            }
            remap[w]
        });
        faces.push(nf);
    }
    let after = faces.len();
    let out = TriMesh::new(verts, faces)?;
    if after > target_faces {
        log::warn!("simplify stopped at {after} faces (target {target_faces}): no valid collapse left");
    }
    Ok((
        out,
        SimplifyReport {
            faces_before: before,
            faces_after: after,
            collapses,
            reached_target: after <= target_faces,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{shapes, SurfaceLocator};

    #[test]
    fn below_target_is_identity() {
        let m = shapes::icosphere(1, 1.0);
        let (s, rep) = simplify(&m, 2000).unwrap();
        assert_eq!(s, m);
        assert!(rep.reached_target);
    }

    #[test]
    fn icosphere_to_320_faces_stays_close() {
        let m = shapes::icosphere(3, 1.0);
        let (s, rep) = simplify(&m, 320).unwrap();
        assert!(s.faces().len() <= 320, "{rep:?}");
        assert!(rep.reached_target);
        let loc = SurfaceLocator::new(&m);
        let worst = s
            .vertices()
            .iter()
            .map(|p| loc.closest(p).sq_dist.sqrt())
            .fold(0.0, f64::max);
        assert!(worst <= 0.02, "max distance {worst}");
        assert!(s.boundary_edges().is_empty());
    }

    #[test]
    fn orientation_preserved() {
        let m = shapes::icosphere(3, 1.0);
        let (s, _) = simplify(&m, 200).unwrap();
        for fi in 0..s.faces().len() {
            let c: Vec3 = s.faces()[fi].iter().map(|&v| s.vertices()[v]).sum::<Vec3>() / 3.0;
            assert!(s.face_normal(fi).dot(&c) > 0.0);
        }
    }

    #[test]
    fn open_grid_keeps_boundary() {
        let m = shapes::grid(12, 12, 0.1);
        let (s, _) = simplify(&m, 40).unwrap();
        assert!(s.faces().len() <= 40);
        let (lo, hi) = s.bbox();
        assert!((lo.x - 0.0).abs() < 1e-9 && (hi.x - 1.1).abs() < 1e-9);
        assert!((lo.y - 0.0).abs() < 1e-9 && (hi.y - 1.1).abs() < 1e-9);
    }

    #[test]
    fn tetrahedron_cannot_shrink() {
        let m = shapes::tetrahedron();
        let (s, rep) = simplify(&m, 4).unwrap();
        assert_eq!(s.faces().len(), 4);
        assert!(rep.reached_target);
    }
}
