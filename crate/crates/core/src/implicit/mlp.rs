//! Small fully connected network `f(concat(x, z))` with hand-rolled forward
//! and reverse passes.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::FieldSample;
use crate::error::{Error, Result};
use crate::mesh::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    Sine,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Sine => x.sin(),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Sine => x.cos(),
            Activation::Identity => 1.0,
        }
    }
}

/// Dense layer `act(W x + b)`, weights row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            out.push(self.bias[r] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>());
        }
    }
}

#[derive(Deserialize)]
struct RawMlp {
    latent_dim: usize,
    layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMlp")]
pub struct Mlp {
    latent_dim: usize,
    layers: Vec<Layer>,
}

impl TryFrom<RawMlp> for Mlp {
    type Error = Error;

    fn try_from(raw: RawMlp) -> Result<Self> {
        Mlp::new(raw.latent_dim, raw.layers)
    }
}

impl Mlp {
    pub fn new(latent_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("mlp layer list".into()));
        }
        let mut expected_cols = 3 + latent_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.cols != expected_cols {
                return Err(Error::LayerShape {
                    layer: i,
                    message: format!("expected {expected_cols} input columns, found {}", l.cols),
                });
            }
            if l.weights.len() != l.rows * l.cols {
                return Err(Error::LayerShape {
                    layer: i,
                    message: format!("{} weights for a {}x{} matrix", l.weights.len(), l.rows, l.cols),
                });
            }
            if l.bias.len() != l.rows {
                return Err(Error::LayerShape {
                    layer: i,
                    message: format!("bias has {} entries, expected {}", l.bias.len(), l.rows),
                });
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::LayerShape {
                    layer: i,
                    message: "non-finite parameter".into(),
                });
            }
            expected_cols = l.rows;
        }
        if expected_cols != 1 {
            return Err(Error::LayerShape {
                layer: layers.len() - 1,
                message: format!("output layer must have 1 row, found {expected_cols}"),
            });
        }
        Ok(Mlp { latent_dim, layers })
    }

    /// Random network with the given hidden widths and a linear scalar output.
    /// The output bias starts at `-init_radius` and the last-layer weights are
    /// positive so the initial field roughly resembles a sphere of that radius.
    pub fn random<R: Rng>(rng: &mut R, latent_dim: usize, hidden: &[usize], activation: Activation, init_radius: f64) -> Self {
        let mut layers = Vec::new();
        let mut cols = 3 + latent_dim;
        for &rows in hidden {
            let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("positive std");
            layers.push(Layer {
                rows,
                cols,
                weights: (0..rows * cols).map(|_| normal.sample(rng)).collect(),
                bias: vec![0.0; rows],
                activation,
            });
            cols = rows;
        }
        let w = (std::f64::consts::PI / cols as f64).sqrt();
        layers.push(Layer {
            rows: 1,
            cols,
            weights: (0..cols).map(|_| w + 1e-4 * rng.gen_range(-1.0..1.0)).collect(),
            bias: vec![-init_radius],
            activation: Activation::Identity,
        });
        Mlp::new(latent_dim, layers).expect("consistent shapes")
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn input(&self, x: &Vec3, z: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 + z.len());
        v.extend_from_slice(x.as_slice());
        v.extend_from_slice(z);
        v
    }

    pub(crate) fn forward(&self, x: &Vec3, z: &[f64]) -> f64 {
        let mut cur = self.input(x, z);
        let mut next = Vec::new();
        for l in &self.layers {
            l.affine(&cur, &mut next);
            for v in next.iter_mut() {
                *v = l.activation.apply(*v);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur[0]
    }

    /// Inputs to each layer plus pre-activations.
    fn trace(&self, input: Vec<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut inputs = vec![input];
        let mut pres = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut pre = Vec::new();
            l.affine(inputs.last().unwrap(), &mut pre);
            let out = pre.iter().map(|&v| l.activation.apply(v)).collect();
            pres.push(pre);
            inputs.push(out);
        }
        (inputs, pres)
    }

    pub(crate) fn sample(&self, x: &Vec3, z: &[f64]) -> FieldSample {
        let (inputs, pres) = self.trace(self.input(x, z));
        let value = inputs.last().unwrap()[0];
        let mut g = vec![1.0];
        for (l, pre) in self.layers.iter().zip(&pres).rev() {
            let gp: Vec<f64> = g.iter().zip(pre).map(|(gi, &p)| gi * l.activation.derivative(p)).collect();
            let mut gin = vec![0.0; l.cols];
            for (r, &gr) in gp.iter().enumerate() {
                let row = &l.weights[r * l.cols..(r + 1) * l.cols];
                for (c, w) in row.iter().enumerate() {
                    gin[c] += w * gr;
                }
            }
            g = gin;
        }
        FieldSample {
            value,
            grad_x: Vec3::new(g[0], g[1], g[2]),
            grad_z: g[3..].to_vec(),
        }
    }

    fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Adds `scale * d value / d params` to `grad` (layer order, weights then bias).
    fn accumulate_param_grad(&self, x: &Vec3, z: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
        let (inputs, pres) = self.trace(self.input(x, z));
        let value = inputs.last().unwrap()[0];
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.weights.len() + l.bias.len();
        }
        let mut g = vec![scale];
        for (li, l) in self.layers.iter().enumerate().rev() {
            let pre = &pres[li];
            let inp = &inputs[li];
            let gp: Vec<f64> = g.iter().zip(pre).map(|(gi, &p)| gi * l.activation.derivative(p)).collect();
            let base = offsets[li];
            let mut gin = vec![0.0; l.cols];
            for (r, &gr) in gp.iter().enumerate() {
                let row = r * l.cols;
                for c in 0..l.cols {
                    grad[base + row + c] += gr * inp[c];
                    gin[c] += l.weights[row + c] * gr;
                }
                grad[base + l.weights.len() + r] += gr;
            }
            g = gin;
        }
        value
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }
}

pub fn load_mlp_weights(path: impl AsRef<Path>) -> Result<Mlp> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawMlp = serde_json::from_str(&text)?;
    Mlp::new(raw.latent_dim, raw.layers)
}

pub fn save_mlp_weights(mlp: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(mlp)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One supervised point `(x, z) -> target value`.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSample {
    pub x: Vec3,
    pub z: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 2000,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Adam on the mean absolute error `|f(x, z) - target|`. Returns the
/// minibatch loss per step.
pub fn fit_mlp(mlp: &mut Mlp, samples: &[FitSample], cfg: &FitConfig) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("fit samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.z.len() != mlp.latent_dim) {
        return Err(Error::DimensionMismatch {
            expected: mlp.latent_dim,
            got: s.z.len(),
        });
    }
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let np = mlp.param_count();
    let mut m = vec![0.0; np];
    let mut v = vec![0.0; np];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let batch = cfg.batch_size.clamp(1, samples.len());
    let mut cursor = samples.len();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        if cursor + batch > samples.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let net = &*mlp;
        let parts: Vec<(Vec<f64>, f64)> = idx
            .par_chunks(32)
            .map(|chunk| {
                let mut g = vec![0.0; np];
                let mut loss = 0.0;
                for &i in chunk {
                    let s = &samples[i];
                    let f = net.forward(&s.x, &s.z);
                    let r = f - s.target;
                    loss += r.abs();
                    net.accumulate_param_grad(&s.x, &s.z, r.signum() / batch as f64, &mut g);
                }
                (g, loss)
            })
            .collect();
        let mut grad = vec![0.0; np];
        let mut loss = 0.0;
        for (g, l) in parts {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
            loss += l;
        }
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite fitting loss at step {step}")));
        }
        history.push(loss / batch as f64);
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        for (k, p) in mlp.params_mut().enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * grad[k];
            v[k] = b2 * v[k] + (1.0 - b2) * grad[k] * grad[k];
            *p -= cfg.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::implicit::{ImplicitGenerator, LatentCode};

    fn small(rng: &mut ChaCha8Rng) -> Mlp {
        Mlp::random(rng, 2, &[64, 64, 64], Activation::Softplus, 0.8)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for act in [Activation::Softplus, Activation::Sine] {
            let g = ImplicitGenerator::Mlp(Mlp::random(&mut rng, 2, &[16, 16], act, 0.5));
            for _ in 0..100 {
                let x = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
                let z = LatentCode::sample_normal(&mut rng, 2);
                crate::implicit::tests::assert_gradients_match(&g, &x, &z);
            }
        }
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::random(&mut rng, 1, &[5, 4], Activation::Softplus, 0.5);
        let x = Vec3::new(0.3, -0.2, 0.7);
        let z = [0.4];
        let mut grad = vec![0.0; net.param_count()];
        net.accumulate_param_grad(&x, &z, 1.0, &mut grad);
        let h = 1e-6;
        for k in 0..grad.len() {
            let mut p = net.clone();
            *p.params_mut().nth(k).unwrap() += h;
            let mut q = net.clone();
            *q.params_mut().nth(k).unwrap() -= h;
            let fd = (p.forward(&x, &z) - q.forward(&x, &z)) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-6 * fd.abs().max(1.0), "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn smoke_sweep_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = ImplicitGenerator::Mlp(small(&mut rng));
        for _ in 0..500 {
            let x = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let z = LatentCode::sample_normal(&mut rng, 2);
            let s = g.sample(&x, &z).unwrap();
            assert!(s.value.is_finite() && s.grad_x.iter().all(|v| v.is_finite()));
            assert!(s.grad_z.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = small(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.json");
        save_mlp_weights(&net, &p).unwrap();
        let back = load_mlp_weights(&p).unwrap();
        assert_eq!(back, net);
        for _ in 0..100 {
            let x = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let z = [rng.gen(), rng.gen()];
            assert_eq!(back.forward(&x, &z).to_bits(), net.forward(&x, &z).to_bits());
        }
    }

    #[test]
    fn mismatched_layer_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut layers = Mlp::random(&mut rng, 1, &[4, 4], Activation::Softplus, 0.5).layers;
        layers[1].cols = 5;
        match Mlp::new(1, layers) {
            Err(Error::LayerShape { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("unexpected {other:?}"),
        }
        let text = r#"{"latent_dim": 0, "layers": [{"rows": 1, "cols": 2, "weights": [1, 2], "bias": [0], "activation": "identity"}]}"#;
        assert!(serde_json::from_str::<Mlp>(text).is_err());
    }

    #[test]
    fn fitting_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = Mlp::random(&mut rng, 1, &[32, 32], Activation::Softplus, 1.0);
        let samples: Vec<FitSample> = (0..1000)
            .map(|_| {
                let x = Vec3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
                let r = rng.gen_range(0.8..1.2);
                FitSample {
                    x,
                    z: vec![r],
                    target: x.norm() - r,
                }
            })
            .collect();
        let cfg = FitConfig {
            steps: 400,
            batch_size: 128,
            learning_rate: 3e-3,
            seed: 1,
        };
        let hist = fit_mlp(&mut net, &samples, &cfg).unwrap();
        let head: f64 = hist[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = hist[hist.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < 0.5 * head, "{head} -> {tail}");
    }
}
