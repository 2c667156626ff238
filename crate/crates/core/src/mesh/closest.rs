//! Closest points on a triangle surface via a bounding-volume hierarchy.

use super::{KdTree, TriMesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub point: Vec3,
    /// Face index, or `None` when the target has no faces and the result is a
    /// vertex.
    pub face: Option<usize>,
    pub sq_dist: f64,
    /// Unit face normal (zero for vertex results).
    pub normal: Vec3,
}

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision
/// Detection, 5.1.5).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

#[derive(Debug, Clone)]
struct BvhNode {
    lo: Vec3,
    hi: Vec3,
    // leaf: start..end into `tris`; inner: children indices
    left: usize,
    right: usize,
    start: usize,
    end: usize,
}

const LEAF: usize = 4;

#[derive(Debug, Clone)]
pub struct SurfaceLocator {
    verts: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    normals: Vec<Vec3>,
    tris: Vec<usize>,
    centroids: Vec<Vec3>,
    nodes: Vec<BvhNode>,
    vertex_tree: Option<KdTree>,
}

impl SurfaceLocator {
    pub fn new(mesh: &TriMesh) -> Self {
        let verts = mesh.vertices().to_vec();
        let faces = mesh.faces().to_vec();
        let normals = (0..faces.len())
            .map(|f| {
                let n = mesh.face_normal(f);
                let l = n.norm();
                if l > 0.0 {
                    n / l
                } else {
                    n
                }
            })
            .collect();
        let mut loc = SurfaceLocator {
            verts,
            tris: (0..faces.len()).collect(),
            centroids: faces
                .iter()
                .map(|f| (mesh.vertices()[f[0]] + mesh.vertices()[f[1]] + mesh.vertices()[f[2]]) / 3.0)
                .collect(),
            faces,
            normals,
            nodes: Vec::new(),
            vertex_tree: None,
        };
        if loc.faces.is_empty() {
            loc.vertex_tree = Some(KdTree::new(&loc.verts));
        } else {
            let n = loc.tris.len();
            loc.build(0, n);
        }
        loc
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &t in &self.tris[start..end] {
            for &v in &self.faces[t] {
                lo = lo.inf(&self.verts[v]);
                hi = hi.sup(&self.verts[v]);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(BvhNode {
            lo,
            hi,
            left: usize::MAX,
            right: usize::MAX,
            start,
            end,
        });
        if end - start > LEAF {
            let axis = (hi - lo).imax();
            let mid = (start + end) / 2;
            let cents = &self.centroids;
            self.tris[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
                cents[a][axis].total_cmp(&cents[b][axis]).then(a.cmp(&b))
            });
            let left = self.build(start, mid);
            let right = self.build(mid, end);
            self.nodes[id].left = left;
            self.nodes[id].right = right;
        }
        id
    }

    fn box_dist2(node: &BvhNode, p: &Vec3) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let v = if p[k] < node.lo[k] {
                node.lo[k] - p[k]
            } else if p[k] > node.hi[k] {
                p[k] - node.hi[k]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }

    pub fn closest(&self, p: &Vec3) -> SurfacePoint {
        if let Some(tree) = &self.vertex_tree {
            let (i, d) = tree.nearest(p).expect("non-empty target");
            return SurfacePoint {
                point: self.verts[i],
                face: None,
                sq_dist: d,
                normal: Vec3::zeros(),
            };
        }
        let mut best = SurfacePoint {
            point: Vec3::zeros(),
            face: None,
            sq_dist: f64::INFINITY,
            normal: Vec3::zeros(),
        };
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if Self::box_dist2(node, p) > best.sq_dist {
                continue;
            }
            if node.left == usize::MAX {
                for &t in &self.tris[node.start..node.end] {
                    let [a, b, c] = self.faces[t];
                    let q = closest_point_on_triangle(p, &self.verts[a], &self.verts[b], &self.verts[c]);
                    let d = (q - p).norm_squared();
                    if d < best.sq_dist || (d == best.sq_dist && Some(t) < best.face) {
                        best = SurfacePoint {
                            point: q,
                            face: Some(t),
                            sq_dist: d,
                            normal: self.normals[t],
                        };
                    }
                }
            } else {
                let (l, r) = (node.left, node.right);
                let dl = Self::box_dist2(&self.nodes[l], p);
                let dr = Self::box_dist2(&self.nodes[r], p);
                if dl < dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn triangle_regions() {
        let a = Vec3::zeros();
        let b = Vec3::x();
        let c = Vec3::y();
        let q = closest_point_on_triangle(&Vec3::new(0.2, 0.2, 1.0), &a, &b, &c);
        assert!((q - Vec3::new(0.2, 0.2, 0.0)).norm() < 1e-15);
        assert_eq!(closest_point_on_triangle(&Vec3::new(-1.0, -1.0, 0.0), &a, &b, &c), a);
        assert_eq!(closest_point_on_triangle(&Vec3::new(0.5, -1.0, 0.0), &a, &b, &c), Vec3::new(0.5, 0.0, 0.0));
        let q = closest_point_on_triangle(&Vec3::new(1.0, 1.0, 0.0), &a, &b, &c);
        assert!((q - Vec3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn bvh_matches_linear_scan() {
        let mesh = shapes::random_blob(&mut ChaCha8Rng::seed_from_u64(2), 2);
        let loc = SurfaceLocator::new(&mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let best = mesh
                .faces()
                .iter()
                .map(|f| {
                    let v = mesh.vertices();
                    (closest_point_on_triangle(&p, &v[f[0]], &v[f[1]], &v[f[2]]) - p).norm_squared()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((loc.closest(&p).sq_dist - best).abs() < 1e-14);
        }
    }
}
