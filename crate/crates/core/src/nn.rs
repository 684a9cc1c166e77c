//! Dense tanh networks with hand-written reverse-mode gradients and Adam.
//!
//! Batches are row-major: an input of shape `(batch, in)` goes through
//! `x W + b` per layer, with `tanh` between layers. The head is either linear
//! or a softmax over the final logits. [`Mlp::backward`] takes the gradient of
//! a scalar loss with respect to the logits (the pre-softmax outputs).

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA: &str = "bms-bench/mlp/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// Shape `(in, out)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    head: Head,
    /// Bumped on every parameter change; tapes from older versions are stale.
    version: u64,
}

/// Forward intermediates needed by the reverse pass.
#[derive(Debug)]
pub struct GradTape {
    /// Input to each layer (the raw input, then post-tanh activations).
    inputs: Vec<Array2<f64>>,
    version: u64,
}

#[derive(Debug)]
pub struct Forward {
    /// Probabilities for a softmax head, otherwise equal to `logits`.
    pub output: Array2<f64>,
    pub logits: Array2<f64>,
    pub tape: GradTape,
}

/// Parameter gradients with the same shapes as the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.w.iter().chain(l.b.iter()).map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.w *= factor;
            l.b *= factor;
        }
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|g| g.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }
}

impl Mlp {
    /// Xavier-uniform weights, zero biases. `widths` lists every layer width
    /// including input and output, e.g. `[6, 64, 64, 3]`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], head: Head, rng: &mut R) -> Result<Self> {
        Self::with_output_gain(widths, head, 1.0, rng)
    }

    /// Like [`Mlp::new`] with the last layer's weights multiplied by `gain`.
    pub fn with_output_gain<R: Rng + ?Sized>(widths: &[usize], head: Head, gain: f64, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Shape(format!("invalid layer widths {widths:?}")));
        }
        let n_layers = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let g = if i + 1 == n_layers { gain } else { 1.0 };
                let w = Array2::from_shape_fn((fan_in, fan_out), |_| g * rng.random_range(-limit..=limit));
                Dense {
                    w,
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            layers,
            head,
            version: 0,
        })
    }

    pub fn from_layers(layers: Vec<Dense>, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.w.ncols() != l.b.len() {
                return Err(Error::Shape(format!(
                    "layer {i}: weight has {} outputs but bias has {}",
                    l.w.ncols(),
                    l.b.len()
                )));
            }
            if i > 0 && layers[i - 1].w.ncols() != l.w.nrows() {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs but previous layer emits {}",
                    l.w.nrows(),
                    layers[i - 1].w.ncols()
                )));
            }
        }
        Ok(Self {
            layers,
            head,
            version: 0,
        })
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").w.ncols()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.w.ncols()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn check_input(&self, cols: usize, data: impl Iterator<Item = f64>) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {cols} features, network expects {}",
                self.input_dim()
            )));
        }
        let mut data = data;
        if data.any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        Ok(())
    }

    /// Batched forward pass recording a tape for [`Mlp::backward`].
    pub fn forward(&self, input: &Array2<f64>) -> Result<Forward> {
        self.check_input(input.ncols(), input.iter().copied())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.dot(&layer.w);
            z += &layer.b;
            inputs.push(x);
            if i < last {
                z.mapv_inplace(tanh);
            }
            x = z;
        }
        let logits = x;
        let output = match self.head {
            Head::Linear => logits.clone(),
            Head::Softmax => softmax_rows(&logits),
        };
        if output.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network output".into()));
        }
        Ok(Forward {
            output,
            logits,
            tape: GradTape {
                inputs,
                version: self.version,
            },
        })
    }

    /// Single-sample inference without a tape; returns the head output.
    pub fn infer(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len(), input.iter().copied())?;
        let mut x = input.to_vec();
        let mut z: Vec<f64> = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            z.clear();
            z.extend(layer.b.iter());
            match layer.w.as_slice() {
                Some(w) => {
                    let cols = z.len();
                    for (xi, row) in x.iter().zip(w.chunks_exact(cols)) {
                        for (zj, wij) in z.iter_mut().zip(row) {
                            *zj += xi * wij;
                        }
                    }
                }
                None => {
                    for (r, xi) in x.iter().enumerate() {
                        for (zj, wij) in z.iter_mut().zip(layer.w.row(r)) {
                            *zj += xi * wij;
                        }
                    }
                }
            }
            if i < last {
                z.iter_mut().for_each(|v| *v = tanh(*v));
            }
            std::mem::swap(&mut x, &mut z);
        }
        Ok(match self.head {
            Head::Linear => x,
            Head::Softmax => softmax(&x),
        })
    }

    /// Reverse pass. `upstream` is dLoss/dLogits with the forward batch shape.
    /// The tape is consumed; a tape recorded before a parameter update is
    /// rejected as stale.
    pub fn backward(&self, tape: GradTape, upstream: &Array2<f64>) -> Result<Gradients> {
        if tape.version != self.version {
            return Err(Error::State(format!(
                "stale tape: recorded at parameter version {}, network is at {}",
                tape.version, self.version
            )));
        }
        let batch = tape.inputs[0].nrows();
        if upstream.dim() != (batch, self.output_dim()) {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output ({batch}, {})",
                upstream.dim(),
                self.output_dim()
            )));
        }
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.inputs[i];
            grads.push(Dense {
                w: x.t().dot(&delta),
                b: delta.sum_axis(Axis(0)),
            });
            if i > 0 {
                let mut dx = delta.dot(&layer.w.t());
                // x is tanh output of the previous layer: d tanh = 1 - tanh^2.
                dx.zip_mut_with(x, |d, &a| *d *= 1.0 - a * a);
                delta = dx;
            }
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut it = values.iter();
        for l in &mut self.layers {
            for w in l.w.iter_mut().chain(l.b.iter_mut()) {
                *w = *it.next().expect("length checked");
            }
        }
        self.version += 1;
        Ok(())
    }

    fn apply<F: FnMut(&mut f64, f64, usize)>(&mut self, grads: &Gradients, mut f: F) {
        let mut idx = 0;
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (p, gv) in l.w.iter_mut().zip(g.w.iter()).chain(l.b.iter_mut().zip(g.b.iter())) {
                f(p, *gv, idx);
                idx += 1;
            }
        }
        self.version += 1;
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema: CHECKPOINT_SCHEMA.to_string(),
            head: self.head,
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    rows: l.w.nrows(),
                    cols: l.w.ncols(),
                    weights: l.w.iter().copied().collect(),
                    bias: l.b.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(Error::Serde(format!(
                "unsupported checkpoint schema {:?} (expected {CHECKPOINT_SCHEMA})",
                ck.schema
            )));
        }
        let layers = ck
            .layers
            .iter()
            .map(|r| {
                let w = Array2::from_shape_vec((r.rows, r.cols), r.weights.clone())
                    .map_err(|e| Error::Shape(e.to_string()))?;
                Ok(Dense {
                    w,
                    b: Array1::from(r.bias.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, ck.head)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint().to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&Checkpoint::from_json(&text)?)
    }
}

/// Text checkpoint: shapes plus row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub head: Head,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Hidden activation, `1 - 2 / (exp(2x) + 1)`. Agrees with `f64::tanh` to
/// within a few ulps in absolute terms and costs one `exp`; saturates cleanly
/// to +-1.
#[inline]
pub fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

/// Log-sum-exp stabilized softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| z - lse).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let p = softmax(row.as_slice().expect("standard layout"));
        row.assign(&ArrayView1::from(&p));
    }
    out
}

pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let p = log_softmax(row.as_slice().expect("standard layout"));
        row.assign(&ArrayView1::from(&p));
    }
    out
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let n = net.param_count();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. Non-finite gradients abort without touching the
    /// parameters or the moment estimates.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers.len()
            || grads
                .layers
                .iter()
                .zip(&net.layers)
                .any(|(g, l)| g.w.dim() != l.w.dim() || g.b.dim() != l.b.dim())
        {
            return Err(Error::Shape("gradient shapes do not match the network".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient (norm {}) after {} Adam steps; update aborted",
                grads.norm(),
                self.t
            )));
        }
        self.t += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        net.apply(grads, |p, g, i| {
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weight_softmax_is_uniform() {
        let layers = vec![Dense {
            w: Array2::zeros((4, 3)),
            b: Array1::zeros(3),
        }];
        let net = Mlp::from_layers(layers, Head::Softmax).unwrap();
        let p = net.infer(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_linear_net() {
        let net = Mlp::from_layers(
            vec![Dense {
                w: Array2::eye(3),
                b: Array1::zeros(3),
            }],
            Head::Linear,
        )
        .unwrap();
        assert_eq!(net.infer(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn seeded_net_is_deterministic() {
        let make = || Mlp::new(&[6, 64, 64, 3], Head::Softmax, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (a, b) = (make(), make());
        assert_eq!(a, b);
        let x = [0.1, -0.2, 0.3, 0.0, 1.0, 0.0];
        assert_eq!(a.infer(&x).unwrap(), b.infer(&x).unwrap());
    }

    #[test]
    fn single_neuron_gradient() {
        let net = Mlp::from_layers(
            vec![Dense {
                w: array![[0.7]],
                b: array![0.3],
            }],
            Head::Linear,
        )
        .unwrap();
        let fwd = net.forward(&array![[2.0]]).unwrap();
        let g = net.backward(fwd.tape, &array![[1.0]]).unwrap();
        assert_eq!(g.layers[0].w[[0, 0]], 2.0);
        assert_eq!(g.layers[0].b[0], 1.0);
    }

    #[test]
    fn shape_and_numeric_errors() {
        let net = Mlp::new(&[2, 4, 1], Head::Linear, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(net.infer(&[1.0]), Err(Error::Shape(_))));
        assert!(matches!(net.infer(&[1.0, f64::NAN]), Err(Error::Numeric(_))));
        assert!(Mlp::new(&[2], Head::Linear, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut net = Mlp::new(&[2, 4, 1], Head::Linear, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let fwd = net.forward(&array![[1.0, 2.0]]).unwrap();
        let params = net.params_flat();
        net.set_params_flat(&params).unwrap();
        assert!(matches!(net.backward(fwd.tape, &array![[1.0]]), Err(Error::State(_))));
    }

    #[test]
    fn softmax_is_stable_for_extreme_logits() {
        let p = softmax(&[1000.0, -1000.0, 999.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
        let lp = log_softmax(&[1000.0, -1000.0, 999.0]);
        assert!(lp.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tanh_matches_std() {
        for i in -4000..=4000 {
            let x = i as f64 / 100.0;
            assert!((tanh(x) - x.tanh()).abs() < 1e-15, "{x}");
        }
        assert_eq!(tanh(1e6), 1.0);
        assert_eq!(tanh(-1e6), -1.0);
        assert!(tanh(f64::NAN).is_nan());
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut net = Mlp::new(&[2, 3, 1], Head::Linear, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = net.params_flat();
        let mut adam = Adam::new(&net, 0.1);
        let zeros = Gradients::zeros_like(&net);
        adam.step(&mut net, &zeros).unwrap();
        assert_eq!(before, net.params_flat());
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut net = Mlp::new(&[2, 3, 1], Head::Linear, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = net.params_flat();
        let mut grads = Gradients::zeros_like(&net);
        for (i, l) in grads.layers.iter_mut().enumerate() {
            l.w.fill(if i == 0 { 0.5 } else { -3.0 });
            l.b.fill(2.0);
        }
        let mut adam = Adam::new(&net, 0.01);
        adam.step(&mut net, &grads).unwrap();
        for ((a, b), g) in net.params_flat().iter().zip(&before).zip(grads.flatten()) {
            assert!(((a - b) + 0.01 * g.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let mut net = Mlp::new(&[2, 3, 1], Head::Linear, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = net.params_flat();
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].w[[0, 0]] = f64::NAN;
        let mut adam = Adam::new(&net, 0.1);
        assert!(matches!(adam.step(&mut net, &grads), Err(Error::Numeric(_))));
        assert_eq!(before, net.params_flat());
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_stable() {
        let net = Mlp::new(&[6, 8, 3], Head::Softmax, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let json = net.to_checkpoint().to_json().unwrap();
        let back = Mlp::from_checkpoint(&Checkpoint::from_json(&json).unwrap()).unwrap();
        assert_eq!(back.params_flat(), net.params_flat());
        assert_eq!(back.to_checkpoint().to_json().unwrap(), json);
    }
}
