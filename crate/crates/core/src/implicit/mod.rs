//! Latent-conditioned implicit fields `f(x, z)` (negative inside) with
//! analytic spatial and latent gradients, iso-surface extraction and latent
//! interpolation paths.

mod marching;
mod mlp;
mod tables;

pub use marching::{marching_cubes, Extraction, VoxelGrid};
pub use mlp::{fit_mlp, load_mlp_weights, save_mlp_weights, Activation, FitConfig, FitSample, Layer, Mlp};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Vec3;

/// Point in the latent space `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentCode(Vec<f64>);

impl LatentCode {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("latent entry {i} is not finite")));
        }
        Ok(LatentCode(values))
    }

    pub fn zeros(d: usize) -> Self {
        LatentCode(vec![0.0; d])
    }

    /// Unit vector `e_i` in `R^d`.
    pub fn basis(d: usize, i: usize) -> Self {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        LatentCode(v)
    }

    pub fn sample_normal<R: Rng>(rng: &mut R, d: usize) -> Self {
        LatentCode((0..d).map(|_| rng.sample(StandardNormal)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `self + t * dir`.
    pub fn offset(&self, t: f64, dir: &[f64]) -> Result<Self> {
        check_dim(self.dim(), dir.len())?;
        LatentCode::new(self.0.iter().zip(dir).map(|(a, b)| a + t * b).collect())
    }

    pub fn distance(&self, other: &LatentCode) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Evenly spaced interior codes `z_start + j (z_end - z_start) / (T + 1)`
/// for `j = 1..=T`.
pub fn latent_path(z_start: &LatentCode, z_end: &LatentCode, steps: usize) -> Result<Vec<LatentCode>> {
    check_dim(z_start.dim(), z_end.dim())?;
    let diff: Vec<f64> = z_end.0.iter().zip(&z_start.0).map(|(b, a)| b - a).collect();
    (1..=steps)
        .map(|j| z_start.offset(j as f64 / (steps + 1) as f64, &diff))
        .collect()
}

/// Value and both gradients of a field at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub value: f64,
    pub grad_x: Vec3,
    pub grad_z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

impl Capsule {
    fn sdf(&self, p: &Vec3) -> (f64, Vec3) {
        let ab = self.b - self.a;
        let len2 = ab.norm_squared();
        let h = if len2 > 0.0 {
            ((p - self.a).dot(&ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let off = p - (self.a + ab * h);
        let dist = off.norm();
        let grad = if dist > 0.0 { off / dist } else { Vec3::zeros() };
        (dist - self.radius, grad)
    }
}

/// Latent-dependent invertible warp: per-axis scaling followed by a swirl
/// about the z axis whose angle grows with the squared distance to that axis.
/// The swirl preserves that distance, so its inverse is the opposite swirl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwirlWarp {
    pub bend0: f64,
    pub bend_gain: Vec<f64>,
    pub scale0: Vec3,
    pub scale_gain: Vec<Vec3>,
    pub rho_ref: f64,
}

impl SwirlWarp {
    pub fn identity(latent_dim: usize) -> Self {
        SwirlWarp {
            bend0: 0.0,
            bend_gain: vec![0.0; latent_dim],
            scale0: Vec3::repeat(1.0),
            scale_gain: vec![Vec3::zeros(); latent_dim],
            rho_ref: 1.0,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.bend_gain.len()
    }

    fn bend(&self, z: &[f64]) -> f64 {
        self.bend0 + self.bend_gain.iter().zip(z).map(|(g, v)| g * v).sum::<f64>()
    }

    fn scale(&self, z: &[f64]) -> Vec3 {
        self.scale_gain
            .iter()
            .zip(z)
            .fold(self.scale0, |acc, (g, v)| acc + g * *v)
    }

    fn angle(&self, bend: f64, x: &Vec3) -> f64 {
        bend * (x.x * x.x + x.y * x.y) / (self.rho_ref * self.rho_ref)
    }

    /// Rest-space point to warped point.
    pub fn forward(&self, p: &Vec3, z: &[f64]) -> Vec3 {
        let q = p.component_mul(&self.scale(z));
        let th = self.angle(self.bend(z), &q);
        let (s, c) = th.sin_cos();
        Vec3::new(c * q.x - s * q.y, s * q.x + c * q.y, q.z)
    }

    /// Warped point back to rest space, with the Jacobians of that inverse
    /// map with respect to `x` (3x3) and `z` (one column per latent entry).
    fn inverse_with_jacobians(&self, x: &Vec3, z: &[f64]) -> (Vec3, nalgebra::Matrix3<f64>, Vec<Vec3>) {
        let bend = self.bend(z);
        let scale = self.scale(z);
        let th = self.angle(bend, x);
        let (s, c) = th.sin_cos();
        let w = Vec3::new(c * x.x + s * x.y, -s * x.x + c * x.y, x.z);
        let p = w.component_div(&scale);
        let dw_dth = Vec3::new(w.y, -w.x, 0.0);
        let k = 1.0 / (self.rho_ref * self.rho_ref);
        let dth_dx = Vec3::new(2.0 * bend * x.x * k, 2.0 * bend * x.y * k, 0.0);
        let rot = nalgebra::Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
        let jw = rot + dw_dth * dth_dx.transpose();
        let inv_s = Vec3::new(1.0 / scale.x, 1.0 / scale.y, 1.0 / scale.z);
        let jx = nalgebra::Matrix3::from_diagonal(&inv_s) * jw;
        let dth_dbend = (x.x * x.x + x.y * x.y) * k;
        let dp_dbend = dw_dth.component_mul(&inv_s) * dth_dbend;
        let jz = (0..self.latent_dim())
            .map(|i| {
                let dscale = self.scale_gain[i];
                dp_dbend * self.bend_gain[i] - w.component_mul(&dscale).component_div(&scale.component_mul(&scale))
            })
            .collect();
        (p, jx, jz)
    }
}

/// Latent-dependent bend: per-axis scaling, then the y axis is rolled onto
/// a circular arc in the xy-plane with curvature `kappa(z)`, keeping arc
/// length along it. With an `extent`, only `|y| <= extent` is rolled and
/// the rest follows the end sections rigidly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArcWarp {
    pub curvature0: f64,
    pub curvature_gain: Vec<f64>,
    pub scale0: Vec3,
    pub scale_gain: Vec<Vec3>,
    #[serde(default)]
    pub extent: Option<f64>,
}

/// `sin(t) / t`, `(1 - cos t) / t`, `(1 - cos t) / t^2`, `(sin t - t cos t) / t^2`.
fn arc_series(t: f64) -> (f64, f64, f64, f64) {
    if t.abs() < 1e-4 {
        let t2 = t * t;
        (1.0 - t2 / 6.0, t / 2.0 - t * t2 / 24.0, 0.5 - t2 / 24.0, t / 3.0 - t * t2 / 30.0)
    } else {
        let (s, c) = t.sin_cos();
        (s / t, (1.0 - c) / t, (1.0 - c) / (t * t), (s - t * c) / (t * t))
    }
}

/// Rigid frame of the rolled section at axial position `y_end`: origin,
/// section axis, tangent, and their curvature derivatives.
struct EndFrame {
    origin: Vec3,
    u: Vec3,
    t: Vec3,
    d_origin: Vec3,
    d_u: Vec3,
    d_t: Vec3,
}

impl EndFrame {
    fn new(kappa: f64, y_end: f64) -> Self {
        let phi = kappa * y_end;
        let (s, c) = phi.sin_cos();
        let (sinc, f1, f2, g) = arc_series(phi);
        EndFrame {
            origin: Vec3::new(y_end * f1, y_end * sinc, 0.0),
            u: Vec3::new(c, -s, 0.0),
            t: Vec3::new(s, c, 0.0),
            d_origin: Vec3::new(y_end * y_end * (sinc - f2), -y_end * y_end * g, 0.0),
            d_u: Vec3::new(-s, -c, 0.0) * y_end,
            d_t: Vec3::new(c, -s, 0.0) * y_end,
        }
    }
}

impl ArcWarp {
    pub fn latent_dim(&self) -> usize {
        self.curvature_gain.len()
    }

    fn curvature(&self, z: &[f64]) -> f64 {
        self.curvature0 + self.curvature_gain.iter().zip(z).map(|(g, v)| g * v).sum::<f64>()
    }

    fn scale(&self, z: &[f64]) -> Vec3 {
        self.scale_gain
            .iter()
            .zip(z)
            .fold(self.scale0, |acc, (g, v)| acc + g * *v)
    }

    fn roll(&self, q: &Vec3, kappa: f64) -> Vec3 {
        if let Some(e) = self.extent {
            if q.y.abs() > e {
                let y_end = e.copysign(q.y);
                let f = EndFrame::new(kappa, y_end);
                return f.origin + f.u * q.x + f.t * (q.y - y_end) + Vec3::z() * q.z;
            }
        }
        let phi = kappa * q.y;
        let (s, c) = phi.sin_cos();
        let (sinc, f1, _, _) = arc_series(phi);
        Vec3::new(q.x * c + q.y * f1, q.y * sinc - q.x * s, q.z)
    }

    pub fn forward(&self, p: &Vec3, z: &[f64]) -> Vec3 {
        self.roll(&p.component_mul(&self.scale(z)), self.curvature(z))
    }

    /// Rolled-space point, its Jacobian with respect to `x`, and its
    /// derivative with respect to the curvature.
    fn unroll(&self, x: &Vec3, kappa: f64) -> (Vec3, nalgebra::Matrix3<f64>, Vec3) {
        let (a, b) = (kappa * x.y, 1.0 - kappa * x.x);
        // 1 - kappa * q.x: distance to the bend center over the bend radius
        let m = a.hypot(b).max(1e-12);
        let qx = (2.0 * x.x - kappa * (x.x * x.x + x.y * x.y)) / (1.0 + m);
        let qy = if b > 0.0 {
            let t = a / b;
            let atanc = if t.abs() < 1e-8 { 1.0 - t * t / 3.0 } else { t.atan() / t };
            x.y / b * atanc
        } else {
            a.atan2(b) / kappa
        };
        if let Some(e) = self.extent {
            if qy.abs() > e {
                let f = EndFrame::new(kappa, e.copysign(qy));
                let d = x - f.origin;
                let q = Vec3::new(d.dot(&f.u), e.copysign(qy) + d.dot(&f.t), x.z);
                let jx = nalgebra::Matrix3::new(f.u.x, f.u.y, 0.0, f.t.x, f.t.y, 0.0, 0.0, 0.0, 1.0);
                let dq = Vec3::new(
                    d.dot(&f.d_u) - f.d_origin.dot(&f.u),
                    d.dot(&f.d_t) - f.d_origin.dot(&f.t),
                    0.0,
                );
                return (q, jx, dq);
            }
        }
        let phi = kappa * qy;
        let (s, c) = phi.sin_cos();
        let (sinc, _, f2, g) = arc_series(phi);
        // inverse of the roll's xy Jacobian [[c, s m], [-s, c m]]
        let jinv = nalgebra::Matrix3::new(c, -s, 0.0, s / m, c / m, 0.0, 0.0, 0.0, 1.0);
        let dx_dkappa = Vec3::new(qy * qy * (m * sinc - f2), -qy * qy * g - qx * qy * c, 0.0);
        (Vec3::new(qx, qy, x.z), jinv, -(jinv * dx_dkappa))
    }

    fn inverse_with_jacobians(&self, x: &Vec3, z: &[f64]) -> (Vec3, nalgebra::Matrix3<f64>, Vec<Vec3>) {
        let scale = self.scale(z);
        let (q, jq, dq_dkappa) = self.unroll(x, self.curvature(z));
        let inv_s = Vec3::new(1.0 / scale.x, 1.0 / scale.y, 1.0 / scale.z);
        let jx = nalgebra::Matrix3::from_diagonal(&inv_s) * jq;
        let p = q.component_mul(&inv_s);
        let jz = (0..self.latent_dim())
            .map(|k| {
                (dq_dkappa * self.curvature_gain[k]).component_mul(&inv_s)
                    - p.component_mul(&self.scale_gain[k]).component_mul(&inv_s)
            })
            .collect();
        (p, jx, jz)
    }
}

/// Rest-space to shape-space map of a capsule blend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warp {
    Swirl(SwirlWarp),
    Arc(ArcWarp),
}

impl Warp {
    pub fn latent_dim(&self) -> usize {
        match self {
            Warp::Swirl(w) => w.latent_dim(),
            Warp::Arc(w) => w.latent_dim(),
        }
    }

    pub fn forward(&self, p: &Vec3, z: &[f64]) -> Vec3 {
        match self {
            Warp::Swirl(w) => w.forward(p, z),
            Warp::Arc(w) => w.forward(p, z),
        }
    }

    fn inverse_with_jacobians(&self, x: &Vec3, z: &[f64]) -> (Vec3, nalgebra::Matrix3<f64>, Vec<Vec3>) {
        match self {
            Warp::Swirl(w) => w.inverse_with_jacobians(x, z),
            Warp::Arc(w) => w.inverse_with_jacobians(x, z),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    /// Unit direction of the bump center on the sphere.
    pub direction: Vec3,
    pub width: f64,
    pub amplitude: f64,
}

/// Family of implicit fields with analytic gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ImplicitGenerator {
    /// `|x - c| - r(z)`, `r(z) = radius0 + radius_gain . z`.
    Sphere {
        center: Vec3,
        radius0: f64,
        radius_gain: Vec<f64>,
    },
    /// `|(x - c) / a(z)| - 1` with per-axis semi-axes `a(z) = axes0 + sum_k z_k axes_gain[k]`.
    Ellipsoid {
        center: Vec3,
        axes0: Vec3,
        axes_gain: Vec<Vec3>,
    },
    /// Smooth union (log-sum-exp) of capsules, pulled back through a latent warp.
    CapsuleBlend {
        capsules: Vec<Capsule>,
        smoothness: f64,
        warp: Warp,
    },
    /// Star-shaped surface `|x - c| = radius0 + sum_k z_k a_k exp(-|u - u_k|^2 / w_k^2)`.
    RadialBump {
        center: Vec3,
        radius0: f64,
        bumps: Vec<Bump>,
    },
    /// `inner(x - sum_k z_k shift[k], inner_code)`.
    Translated {
        inner: Box<ImplicitGenerator>,
        inner_code: LatentCode,
        shift: Vec<Vec3>,
    },
    Mlp(Mlp),
}

impl ImplicitGenerator {
    pub fn latent_dim(&self) -> usize {
        match self {
            ImplicitGenerator::Sphere { radius_gain, .. } => radius_gain.len(),
            ImplicitGenerator::Ellipsoid { axes_gain, .. } => axes_gain.len(),
            ImplicitGenerator::CapsuleBlend { warp, .. } => warp.latent_dim(),
            ImplicitGenerator::RadialBump { bumps, .. } => bumps.len(),
            ImplicitGenerator::Translated { shift, .. } => shift.len(),
            ImplicitGenerator::Mlp(m) => m.latent_dim(),
        }
    }

    fn check(&self, z: &LatentCode) -> Result<()> {
        check_dim(self.latent_dim(), z.dim())
    }

    pub fn eval(&self, x: &Vec3, z: &LatentCode) -> Result<f64> {
        self.check(z)?;
        Ok(self.value_unchecked(x, z.as_slice()))
    }

    pub fn grad_x(&self, x: &Vec3, z: &LatentCode) -> Result<Vec3> {
        Ok(self.sample(x, z)?.grad_x)
    }

    pub fn grad_z(&self, x: &Vec3, z: &LatentCode) -> Result<Vec<f64>> {
        Ok(self.sample(x, z)?.grad_z)
    }

    pub fn sample(&self, x: &Vec3, z: &LatentCode) -> Result<FieldSample> {
        self.check(z)?;
        Ok(self.sample_unchecked(x, z.as_slice()))
    }

    pub(crate) fn value_unchecked(&self, x: &Vec3, z: &[f64]) -> f64 {
        match self {
            ImplicitGenerator::Mlp(m) => m.forward(x, z),
            ImplicitGenerator::Sphere {
                center,
                radius0,
                radius_gain,
            } => (x - center).norm() - radius0 - dot(radius_gain, z),
            _ => self.sample_unchecked(x, z).value,
        }
    }

    pub(crate) fn sample_unchecked(&self, x: &Vec3, z: &[f64]) -> FieldSample {
        match self {
            ImplicitGenerator::Sphere {
                center,
                radius0,
                radius_gain,
            } => {
                let r = x - center;
                let len = r.norm();
                FieldSample {
                    value: len - radius0 - dot(radius_gain, z),
                    grad_x: if len > 0.0 { r / len } else { Vec3::zeros() },
                    grad_z: radius_gain.iter().map(|g| -g).collect(),
                }
            }
            ImplicitGenerator::Ellipsoid {
                center,
                axes0,
                axes_gain,
            } => {
                let a = axes(axes0, axes_gain, z);
                let q = (x - center).component_div(&a);
                let rho = q.norm();
                if rho == 0.0 {
                    return FieldSample {
                        value: -1.0,
                        grad_x: Vec3::zeros(),
                        grad_z: vec![0.0; z.len()],
                    };
                }
                let grad_x = q.component_div(&a) / rho;
                // d f / d a_k = -q_k^2 / (rho a_k)
                let grad_a = -q.component_mul(&q).component_div(&a) / rho;
                FieldSample {
                    value: rho - 1.0,
                    grad_x,
                    grad_z: axes_gain.iter().map(|g| grad_a.dot(g)).collect(),
                }
            }
            ImplicitGenerator::CapsuleBlend {
                capsules,
                smoothness,
                warp,
            } => {
                let (p, jx, jz) = warp.inverse_with_jacobians(x, z);
                let (value, g) = blend(capsules, *smoothness, &p);
                FieldSample {
                    value,
                    grad_x: jx.transpose() * g,
                    grad_z: jz.iter().map(|c| c.dot(&g)).collect(),
                }
            }
            ImplicitGenerator::RadialBump {
                center,
                radius0,
                bumps,
            } => {
                let r = x - center;
                let rho = r.norm();
                if rho == 0.0 {
                    return FieldSample {
                        value: -radius0,
                        grad_x: Vec3::zeros(),
                        grad_z: vec![0.0; z.len()],
                    };
                }
                let u = r / rho;
                let (rad, grad_u, per_bump) = bump_radius(*radius0, bumps, &u, z);
                let tangential = grad_u - u * u.dot(&grad_u);
                FieldSample {
                    value: rho - rad,
                    grad_x: u - tangential / rho,
                    grad_z: per_bump.iter().map(|b| -b).collect(),
                }
            }
            ImplicitGenerator::Translated {
                inner,
                inner_code,
                shift,
            } => {
                let off = shift.iter().zip(z).fold(Vec3::zeros(), |acc, (u, v)| acc + u * *v);
                let s = inner.sample_unchecked(&(x - off), inner_code.as_slice());
                FieldSample {
                    value: s.value,
                    grad_z: shift.iter().map(|u| -s.grad_x.dot(u)).collect(),
                    grad_x: s.grad_x,
                }
            }
            ImplicitGenerator::Mlp(m) => m.sample(x, z),
        }
    }

    /// Maps a point on the `from` level set to its analytically corresponding
    /// point on the `to` level set. `None` for learned fields.
    pub fn transport(&self, x: &Vec3, from: &LatentCode, to: &LatentCode) -> Result<Option<Vec3>> {
        self.check(from)?;
        self.check(to)?;
        let (zf, zt) = (from.as_slice(), to.as_slice());
        Ok(match self {
            ImplicitGenerator::Sphere {
                center,
                radius0,
                radius_gain,
            } => {
                let rf = radius0 + dot(radius_gain, zf);
                let rt = radius0 + dot(radius_gain, zt);
                Some(center + (x - center) * (rt / rf))
            }
            ImplicitGenerator::Ellipsoid {
                center,
                axes0,
                axes_gain,
            } => {
                let af = axes(axes0, axes_gain, zf);
                let at = axes(axes0, axes_gain, zt);
                Some(center + (x - center).component_div(&af).component_mul(&at))
            }
            ImplicitGenerator::CapsuleBlend { warp, .. } => {
                let (p, _, _) = warp.inverse_with_jacobians(x, zf);
                Some(warp.forward(&p, zt))
            }
            ImplicitGenerator::RadialBump {
                center,
                radius0,
                bumps,
            } => {
                let r = x - center;
                let rho = r.norm();
                if rho == 0.0 {
                    return Ok(Some(*x));
                }
                let u = r / rho;
                let (rf, _, _) = bump_radius(*radius0, bumps, &u, zf);
                let (rt, _, _) = bump_radius(*radius0, bumps, &u, zt);
                Some(center + u * (rho * rt / rf))
            }
            ImplicitGenerator::Translated { shift, .. } => {
                Some(shift.iter().enumerate().fold(*x, |acc, (k, u)| acc + u * (zt[k] - zf[k])))
            }
            ImplicitGenerator::Mlp(_) => None,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axes(axes0: &Vec3, gain: &[Vec3], z: &[f64]) -> Vec3 {
    gain.iter().zip(z).fold(*axes0, |acc, (g, v)| acc + g * *v)
}

/// Smooth minimum `-k log sum exp(-d_i / k)` and its gradient (softmax
/// weights applied to the member gradients).
fn blend(capsules: &[Capsule], k: f64, p: &Vec3) -> (f64, Vec3) {
    let parts: Vec<(f64, Vec3)> = capsules.iter().map(|c| c.sdf(p)).collect();
    if parts.len() == 1 {
        return parts[0];
    }
    let m = parts.iter().map(|(d, _)| -d / k).fold(f64::NEG_INFINITY, f64::max);
    let ws: Vec<f64> = parts.iter().map(|(d, _)| (-d / k - m).exp()).collect();
    let total: f64 = ws.iter().sum();
    let value = -k * (m + total.ln());
    let grad = parts
        .iter()
        .zip(&ws)
        .fold(Vec3::zeros(), |acc, ((_, g), w)| acc + g * (w / total));
    (value, grad)
}

/// Radius in direction `u`, its gradient with respect to `u`, and the
/// partials with respect to each latent entry.
fn bump_radius(r0: f64, bumps: &[Bump], u: &Vec3, z: &[f64]) -> (f64, Vec3, Vec<f64>) {
    let mut r = r0;
    let mut grad = Vec3::zeros();
    let mut per = Vec::with_capacity(bumps.len());
    for (b, &zk) in bumps.iter().zip(z) {
        let diff = u - b.direction;
        let w2 = b.width * b.width;
        let g = b.amplitude * (-diff.norm_squared() / w2).exp();
        per.push(g);
        r += zk * g;
        grad += diff * (-2.0 * zk * g / w2);
    }
    (r, grad, per)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_sphere() -> ImplicitGenerator {
        ImplicitGenerator::Sphere {
            center: Vec3::zeros(),
            radius0: 0.0,
            radius_gain: vec![1.0, 0.0],
        }
    }

    pub(crate) fn families() -> Vec<ImplicitGenerator> {
        vec![
            unit_sphere(),
            ImplicitGenerator::Ellipsoid {
                center: Vec3::new(0.1, 0.0, -0.2),
                axes0: Vec3::new(1.0, 0.8, 1.2),
                axes_gain: vec![Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, 0.05, 0.2)],
            },
            ImplicitGenerator::CapsuleBlend {
                capsules: vec![
                    Capsule {
                        a: Vec3::new(0.0, -1.0, 0.0),
                        b: Vec3::new(0.0, 1.0, 0.0),
                        radius: 0.3,
                    },
                    Capsule {
                        a: Vec3::new(-0.8, 0.2, 0.0),
                        b: Vec3::new(0.8, 0.2, 0.1),
                        radius: 0.2,
                    },
                ],
                smoothness: 0.1,
                warp: Warp::Swirl(SwirlWarp {
                    bend0: 0.2,
                    bend_gain: vec![0.5, -0.1],
                    scale0: Vec3::new(1.0, 1.1, 0.9),
                    scale_gain: vec![Vec3::new(0.0, 0.1, 0.0), Vec3::new(0.05, 0.0, 0.02)],
                    rho_ref: 1.0,
                }),
            },
            ImplicitGenerator::RadialBump {
                center: Vec3::zeros(),
                radius0: 1.0,
                bumps: vec![
                    Bump {
                        direction: Vec3::x(),
                        width: 0.5,
                        amplitude: 0.2,
                    },
                    Bump {
                        direction: Vec3::new(0.0, 0.6, 0.8),
                        width: 0.7,
                        amplitude: -0.1,
                    },
                ],
            },
            ImplicitGenerator::Translated {
                inner: Box::new(unit_sphere()),
                inner_code: LatentCode::new(vec![1.0, 0.0]).unwrap(),
                shift: vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 0.3, 0.4)],
            },
            ImplicitGenerator::CapsuleBlend {
                capsules: vec![Capsule {
                    a: Vec3::new(0.0, -1.0, 0.0),
                    b: Vec3::new(0.0, 1.0, 0.0),
                    radius: 0.3,
                }],
                smoothness: 0.1,
                warp: Warp::Arc(ArcWarp {
                    curvature0: 0.1,
                    curvature_gain: vec![0.8, -0.3],
                    scale0: Vec3::repeat(1.0),
                    scale_gain: vec![Vec3::new(0.0, 0.2, 0.0), Vec3::new(0.1, 0.0, -0.1)],
                    extent: None,
                }),
            },
            ImplicitGenerator::CapsuleBlend {
                capsules: vec![Capsule {
                    a: Vec3::new(0.0, -1.0, 0.0),
                    b: Vec3::new(0.0, 1.0, 0.0),
                    radius: 0.3,
                }],
                smoothness: 0.1,
                warp: Warp::Arc(ArcWarp {
                    curvature0: 0.3,
                    curvature_gain: vec![0.9, 0.0],
                    scale0: Vec3::repeat(1.0),
                    scale_gain: vec![Vec3::zeros(), Vec3::new(0.0, 0.2, 0.0)],
                    extent: Some(0.7),
                }),
            },
        ]
    }

    pub(crate) fn assert_gradients_match(gen: &ImplicitGenerator, x: &Vec3, z: &LatentCode) {
        let h = 1e-5;
        let s = gen.sample(x, z).unwrap();
        let mut fd_x = Vec3::zeros();
        for k in 0..3 {
            let mut xp = *x;
            let mut xm = *x;
            xp[k] += h;
            xm[k] -= h;
            fd_x[k] = (gen.eval(&xp, z).unwrap() - gen.eval(&xm, z).unwrap()) / (2.0 * h);
        }
        let scale = s.grad_x.norm().max(1.0);
        assert!((fd_x - s.grad_x).norm() <= 1e-4 * scale, "grad_x {fd_x} vs {}", s.grad_x);
        for k in 0..z.dim() {
            let zp = z.offset(h, LatentCode::basis(z.dim(), k).as_slice()).unwrap();
            let zm = z.offset(-h, LatentCode::basis(z.dim(), k).as_slice()).unwrap();
            let fd = (gen.eval(x, &zp).unwrap() - gen.eval(x, &zm).unwrap()) / (2.0 * h);
            let scale = s.grad_z[k].abs().max(1.0);
            assert!((fd - s.grad_z[k]).abs() <= 1e-4 * scale, "grad_z[{k}] {fd} vs {}", s.grad_z[k]);
        }
    }

    #[test]
    fn sphere_values_and_gradients() {
        let g = unit_sphere();
        let z = LatentCode::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(g.eval(&Vec3::x(), &z).unwrap(), 0.0);
        assert_eq!(g.eval(&(Vec3::x() * 2.0), &z).unwrap(), 1.0);
        assert_eq!(g.grad_x(&Vec3::x(), &z).unwrap(), Vec3::x());
        assert_eq!(g.grad_z(&Vec3::new(0.3, 2.0, 1.0), &z).unwrap(), vec![-1.0, 0.0]);
        assert!(matches!(
            g.eval(&Vec3::x(), &LatentCode::zeros(3)),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for g in families() {
            for _ in 0..50 {
                let x = Vec3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
                let z = LatentCode::new((0..2).map(|_| rng.gen_range(0.5..1.0)).collect()).unwrap();
                assert_gradients_match(&g, &x, &z);
            }
        }
    }

    #[test]
    fn translation_family_latent_gradient_structure() {
        let g = &families()[4];
        let ImplicitGenerator::Translated { shift, .. } = g else { unreachable!() };
        let z = LatentCode::new(vec![0.2, -0.4]).unwrap();
        let x = Vec3::new(0.9, 0.3, -0.2);
        let s = g.sample(&x, &z).unwrap();
        for (k, u) in shift.iter().enumerate() {
            assert!((s.grad_z[k] + s.grad_x.dot(u)).abs() <= 1e-12);
        }
        // numeric check of the same structure
        let h = 1e-6;
        let zp = z.offset(h, &[1.0, 0.0]).unwrap();
        let fd = (g.eval(&x, &zp).unwrap() - s.value) / h;
        assert!((fd + s.grad_x.dot(&shift[0])).abs() <= 1e-6);
    }

    #[test]
    fn transport_lands_on_target_level_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = VoxelGrid::cube(Vec3::zeros(), 2.0, 24).unwrap();
        for g in families() {
            let z0 = LatentCode::new(vec![0.8, 0.6]).unwrap();
            let z1 = LatentCode::new(vec![0.9, 0.7]).unwrap();
            let mesh = marching_cubes(&g, &z0, &grid).unwrap().mesh;
            for _ in 0..20 {
                let x = mesh.vertices()[rng.gen_range(0..mesh.n())];
                let y = g.transport(&x, &z0, &z1).unwrap().unwrap();
                let before = g.eval(&x, &z0).unwrap().abs();
                let after = g.eval(&y, &z1).unwrap().abs();
                assert!(after <= 1.5 * before + 1e-9, "{after} > {before}");
            }
        }
    }

    #[test]
    fn warp_inverts() {
        for idx in [2, 5, 6] {
            let ImplicitGenerator::CapsuleBlend { warp, .. } = &families()[idx] else { unreachable!() };
            for z in [[0.3, 0.7], [-1.5, 0.2], [0.0, 0.0]] {
                let p = Vec3::new(0.2, -0.9, 0.1);
                let x = warp.forward(&p, &z);
                let (q, _, _) = warp.inverse_with_jacobians(&x, &z);
                assert!((p - q).norm() < 1e-13, "{idx} {z:?}: {p} vs {q}");
            }
        }
    }

    #[test]
    fn arc_warp_keeps_axis_length() {
        let w = ArcWarp {
            curvature0: 1.2,
            curvature_gain: vec![],
            scale0: Vec3::repeat(1.0),
            scale_gain: vec![],
            extent: None,
        };
        let pts: Vec<Vec3> = (0..=200).map(|i| w.forward(&Vec3::new(0.0, -1.0 + i as f64 / 100.0, 0.0), &[])).collect();
        let len: f64 = pts.windows(2).map(|p| (p[1] - p[0]).norm()).sum();
        assert!((len - 2.0).abs() < 1e-4, "{len}");
        // center of curvature at (1/kappa, 0): the axis stays on the circle
        for p in &pts {
            assert!(((p - Vec3::new(1.0 / 1.2, 0.0, 0.0)).norm() - 1.0 / 1.2).abs() < 1e-12);
        }
    }

    #[test]
    fn arc_warp_moves_ends_rigidly() {
        let w = ArcWarp {
            curvature0: 1.1,
            curvature_gain: vec![],
            scale0: Vec3::repeat(1.0),
            scale_gain: vec![],
            extent: Some(1.0),
        };
        for y in [1.0, -1.0] {
            let a = Vec3::new(0.2, 1.1 * y, 0.1);
            let b = Vec3::new(-0.3, 1.4 * y, -0.2);
            let (fa, fb) = (w.forward(&a, &[]), w.forward(&b, &[]));
            assert!(((fa - fb).norm() - (a - b).norm()).abs() < 1e-12);
            // continuous across the end of the rolled segment
            let inside = w.forward(&Vec3::new(0.25, y * (1.0 - 1e-9), 0.0), &[]);
            let outside = w.forward(&Vec3::new(0.25, y * (1.0 + 1e-9), 0.0), &[]);
            assert!((inside - outside).norm() < 1e-8);
        }
    }

    #[test]
    fn latent_path_formula() {
        let a = LatentCode::zeros(1);
        let b = LatentCode::new(vec![11.0]).unwrap();
        assert!(latent_path(&a, &b, 0).unwrap().is_empty());
        let p = latent_path(&a, &b, 10).unwrap();
        let vals: Vec<f64> = p.iter().map(|z| z.as_slice()[0]).collect();
        assert_eq!(vals, (1..=10).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn non_finite_latent_rejected() {
        assert!(LatentCode::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn generator_json_round_trip() {
        for g in families() {
            let s = serde_json::to_string(&g).unwrap();
            let back: ImplicitGenerator = serde_json::from_str(&s).unwrap();
            assert_eq!(back, g);
        }
    }
}
