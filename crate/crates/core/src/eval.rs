//! Geodesic correspondence error and error-field export.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{geodesic_distances, write_colored_ply, Correspondence, KdTree, TriMesh, Vec3};

/// Upper end of the error color bar in model units.
pub const DEFAULT_MAX_ERROR: f64 = 0.15;
pub const COLOR_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeMetrics {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceMetrics {
    pub mean: f64,
    pub median: f64,
    pub per_shape: Vec<ShapeMetrics>,
    /// Per shape, one error per source vertex in ascending source order.
    #[serde(skip)]
    pub per_vertex: Vec<Vec<f64>>,
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn summarize(errors: &[f64]) -> ShapeMetrics {
    let mean = if errors.is_empty() {
        0.0
    } else {
        errors.iter().sum::<f64>() / errors.len() as f64
    };
    ShapeMetrics {
        mean,
        median: median(errors),
        max: errors.iter().copied().fold(0.0, f64::max),
    }
}

/// Sorted by source vertex, rejecting duplicate sources and out-of-range
/// targets.
fn by_source(c: &Correspondence, n_target: usize, what: &str) -> Result<BTreeMap<u32, u32>> {
    let mut map = BTreeMap::new();
    for &(s, t) in c {
        if t as usize >= n_target {
            return Err(Error::IndexOutOfRange {
                index: t as i64,
                size: n_target,
            });
        }
        if map.insert(s, t).is_some() {
            return Err(Error::InvalidArgument(format!("{what} maps source vertex {s} twice")));
        }
    }
    Ok(map)
}

fn shape_errors(pred: &Correspondence, gt: &Correspondence, target: &TriMesh, shape: usize) -> Result<Vec<f64>> {
    let p = by_source(pred, target.n(), "prediction")?;
    let g = by_source(gt, target.n(), "ground truth")?;
    if p.len() != g.len() || p.keys().zip(g.keys()).any(|(a, b)| a != b) {
        let missing = g.keys().find(|k| !p.contains_key(k)).or_else(|| p.keys().find(|k| !g.contains_key(k)));
        return Err(Error::InvalidArgument(format!(
            "shape {shape}: prediction covers {} source vertices, ground truth {} (first mismatch at vertex {:?})",
            p.len(),
            g.len(),
            missing
        )));
    }
    // one Dijkstra per distinct ground-truth target vertex
    let mut by_gt: BTreeMap<u32, Vec<(usize, u32)>> = BTreeMap::new();
    for (slot, (s, t_gt)) in g.iter().enumerate() {
        by_gt.entry(*t_gt).or_default().push((slot, p[s]));
    }
    let groups: Vec<_> = by_gt.into_iter().collect();
    let parts: Vec<Vec<(usize, f64)>> = groups
        .par_iter()
        .map(|(t_gt, members)| {
            let dist = geodesic_distances(target, &[*t_gt as usize])?;
            members
                .iter()
                .map(|&(slot, t_pred)| {
                    let d = dist[t_pred as usize];
                    if d.is_finite() {
                        Ok((slot, d))
                    } else {
                        Err(Error::Numerical(format!(
                            "shape {shape}: target vertices {t_gt} and {t_pred} are in different components"
                        )))
                    }
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut errors = vec![0.0; g.len()];
    for (slot, d) in parts.into_iter().flatten() {
        errors[slot] = d;
    }
    Ok(errors)
}

/// Edge-graph geodesic distance on each target between predicted and
/// ground-truth target vertices, multiplied by `scale`.
pub fn eval_correspondences(
    pred: &[Correspondence],
    gt: &[Correspondence],
    targets: &[TriMesh],
    scale: f64,
) -> Result<CorrespondenceMetrics> {
    if pred.len() != gt.len() || pred.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions, {} ground truths, {} targets",
            pred.len(),
            gt.len(),
            targets.len()
        )));
    }
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be > 0, got {scale}")));
    }
    let per_vertex: Vec<Vec<f64>> = (0..pred.len())
        .map(|i| {
            shape_errors(&pred[i], &gt[i], &targets[i], i).map(|e| e.into_iter().map(|d| d * scale).collect())
        })
        .collect::<Result<_>>()?;
    let all: Vec<f64> = per_vertex.iter().flatten().copied().collect();
    let total = summarize(&all);
    Ok(CorrespondenceMetrics {
        mean: total.mean,
        median: total.median,
        per_shape: per_vertex.iter().map(|e| summarize(e)).collect(),
        per_vertex,
    })
}

/// Template vertex `v` maps to the target vertex nearest `positions[v]`.
pub fn snap_to_vertices(positions: &[Vec3], target: &TriMesh) -> Result<Correspondence> {
    if target.n() == 0 {
        return Err(Error::Empty("target mesh".into()));
    }
    let tree = KdTree::new(target.vertices());
    Ok(positions
        .par_iter()
        .enumerate()
        .map(|(v, p)| (v as u32, tree.nearest(p).expect("non-empty").0 as u32))
        .collect())
}

/// Color-bar bin of an error, clamped to `[0, max]`.
pub fn error_bin(error: f64, max: f64) -> usize {
    let t = (error / max).clamp(0.0, 1.0);
    (t * (COLOR_BINS - 1) as f64).round() as usize
}

/// Blue at zero through green to red at `max`; the red channel equals the
/// bin index, so every bin has a distinct color.
pub fn colormap(bin: usize) -> [u8; 3] {
    let b = bin.min(COLOR_BINS - 1) as i32;
    let g = 255 - (2 * b - 255).abs();
    [b as u8, g.clamp(0, 255) as u8, (255 - b) as u8]
}

/// Inverse of [`colormap`]: the bin center's error, or `None` for colors
/// off the map.
pub fn decode_color(c: [u8; 3], max: f64) -> Option<f64> {
    let bin = c[0] as usize;
    (colormap(bin) == c).then(|| max * bin as f64 / (COLOR_BINS - 1) as f64)
}

pub fn error_colors(errors: &[f64], max: f64) -> Result<Vec<[u8; 3]>> {
    if !(max > 0.0) {
        return Err(Error::InvalidArgument(format!("color-bar max must be > 0, got {max}")));
    }
    if let Some(e) = errors.iter().find(|e| !(**e >= 0.0)) {
        return Err(Error::InvalidArgument(format!("errors must be >= 0, got {e}")));
    }
    Ok(errors.iter().map(|&e| colormap(error_bin(e, max))).collect())
}

/// Colored PLY of `mesh` with one error per vertex.
pub fn export_error_field(errors: &[f64], mesh: &TriMesh, path: impl AsRef<Path>, max: f64) -> Result<()> {
    if errors.len() != mesh.n() {
        return Err(Error::DimensionMismatch {
            expected: mesh.n(),
            got: errors.len(),
        });
    }
    write_colored_ply(mesh, &error_colors(errors, max)?, path)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::mesh::{all_pairs_mean_distance, load_colored_ply, shapes};

    fn identity(n: usize) -> Correspondence {
        (0..n as u32).map(|v| (v, v)).collect()
    }

    #[test]
    fn exact_prediction_has_zero_error() {
        let m = shapes::icosphere(2, 1.0);
        let c = identity(m.n());
        let r = eval_correspondences(&[c.clone()], &[c], &[m], 1.0).unwrap();
        assert_eq!((r.mean, r.median), (0.0, 0.0));
    }

    #[test]
    fn one_hop_offset_on_unit_grid() {
        // unit spacing; every vertex predicted one step along +x (last column wraps back one step)
        let m = shapes::grid(6, 5, 1.0);
        let gt = identity(m.n());
        let pred: Correspondence = (0..m.n())
            .map(|v| {
                let p = m.vertices()[v];
                let q = p + Vec3::new(if p.x < 4.5 { 1.0 } else { -1.0 }, 0.0, 0.0);
                let t = m.vertices().iter().position(|w| (w - q).norm() < 1e-9).unwrap();
                (v as u32, t as u32)
            })
            .collect();
        let r = eval_correspondences(&[pred], &[gt], &[m], 1.0).unwrap();
        assert!((r.mean - 1.0).abs() < 1e-12, "{}", r.mean);
        assert!((r.median - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_prediction_matches_mean_pair_distance() {
        let m = shapes::icosphere(3, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = m.n();
        let gt = identity(n);
        let mut preds = Vec::new();
        for _ in 0..4 {
            preds.push((0..n as u32).map(|v| (v, rng.gen_range(0..n as u32))).collect::<Correspondence>());
        }
        let r = eval_correspondences(&preds, &vec![gt; 4], &vec![m.clone(); 4], 1.0).unwrap();
        let expected = all_pairs_mean_distance(&m).unwrap();
        assert!((r.mean / expected - 1.0).abs() < 0.1, "{} vs {expected}", r.mean);
    }

    #[test]
    fn errors_scale_with_geometry() {
        let m = shapes::icosphere(2, 1.0);
        let big = m.transformed(|p| p * 2.5).unwrap();
        let gt = identity(m.n());
        let pred: Correspondence = gt.iter().map(|&(s, t)| (s, (t + 7) % m.n() as u32)).collect();
        let a = eval_correspondences(&[pred.clone()], &[gt.clone()], &[m], 1.0).unwrap();
        let b = eval_correspondences(&[pred.clone()], &[gt.clone()], &[big.clone()], 1.0).unwrap();
        assert!((b.mean - 2.5 * a.mean).abs() < 1e-12 * b.mean);
        assert!((b.median - 2.5 * a.median).abs() < 1e-12 * b.median);
        let c = eval_correspondences(&[pred], &[gt], &[big], 100.0).unwrap();
        assert!((c.mean - 100.0 * b.mean).abs() < 1e-9 * c.mean);
    }

    #[test]
    fn coverage_mismatch_is_an_error() {
        let m = shapes::icosphere(1, 1.0);
        let gt = identity(m.n());
        let pred = gt[1..].to_vec();
        let err = eval_correspondences(&[pred], &[gt.clone()], &[m.clone()], 1.0).unwrap_err();
        assert!(err.to_string().contains("vertex Some(0)"), "{err}");
        let dup = vec![(0, 0), (0, 1)];
        assert!(eval_correspondences(&[dup], &[gt.clone()], &[m.clone()], 1.0).is_err());
        let oob = vec![(0, 999)];
        assert!(eval_correspondences(&[oob], &[gt], &[m], 1.0).is_err());
    }

    #[test]
    fn median_is_reported_independently() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let s = summarize(&[0.0, 0.0, 9.0]);
        assert!(s.median < s.mean);
    }

    #[test]
    fn snapping_recovers_vertex_indices() {
        let m = shapes::icosphere(2, 1.0);
        let jitter: Vec<Vec3> = m.vertices().iter().map(|p| p * 1.001).collect();
        assert_eq!(snap_to_vertices(&jitter, &m).unwrap(), identity(m.n()));
    }

    #[test]
    fn colormap_is_injective_and_decodes() {
        let colors: std::collections::BTreeSet<[u8; 3]> = (0..COLOR_BINS).map(colormap).collect();
        assert_eq!(colors.len(), COLOR_BINS);
        assert_eq!(colormap(0), [0, 0, 255]);
        assert_eq!(colormap(255), [255, 0, 0]);
        assert_eq!(decode_color([10, 10, 10], 1.0), None);
        let max = DEFAULT_MAX_ERROR;
        let step = max / (COLOR_BINS - 1) as f64;
        for k in 0..=300 {
            let e = max * 1.2 * k as f64 / 300.0;
            let back = decode_color(colormap(error_bin(e, max)), max).unwrap();
            assert!((back - e.min(max)).abs() <= 0.5 * step + 1e-15, "{e} -> {back}");
        }
    }

    #[test]
    fn error_field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = shapes::icosphere(1, 1.0);
        let path = dir.path().join("err.ply");
        export_error_field(&vec![0.0; m.n()], &m, &path, DEFAULT_MAX_ERROR).unwrap();
        let (_, colors) = load_colored_ply(&path).unwrap();
        assert!(colors.unwrap().iter().all(|c| *c == colormap(0)));

        let errors: Vec<f64> = (0..m.n()).map(|i| 0.2 * i as f64 / m.n() as f64).collect();
        export_error_field(&errors, &m, &path, DEFAULT_MAX_ERROR).unwrap();
        let (back, colors) = load_colored_ply(&path).unwrap();
        assert_eq!(back.vertices(), m.vertices());
        for (e, c) in errors.iter().zip(colors.unwrap()) {
            let d = decode_color(c, DEFAULT_MAX_ERROR).unwrap();
            assert!((d - e.min(DEFAULT_MAX_ERROR)).abs() <= 0.5 * DEFAULT_MAX_ERROR / 255.0 + 1e-15);
            if *e >= DEFAULT_MAX_ERROR {
                assert_eq!(c, colormap(COLOR_BINS - 1));
            }
        }
        assert!(export_error_field(&[-1.0; 12], &m, &path, 0.15).is_err());
    }
}
