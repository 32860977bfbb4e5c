//! Fully connected tanh networks over a shared flat parameter vector, with
//! hand-written backpropagation and Adam.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Layer widths and the position of this network's parameters inside a flat
/// vector. Each layer stores its weights (`out x in`, row major) followed by
/// its bias. Hidden layers use `tanh`; the output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    sizes: Vec<usize>,
    offset: usize,
}

/// Activations of one forward pass, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Activations {
    layers: Vec<Vec<f64>>,
    delta: Vec<f64>,
    scratch: Vec<f64>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.layers.last().map_or(&[], Vec::as_slice)
    }
}

impl Mlp {
    pub fn new(sizes: Vec<usize>, offset: usize) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        Mlp { sizes, offset }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Offsets (relative to `offset`) of each layer's weights and bias.
    fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.sizes.len() - 1);
        let mut at = self.offset;
        for w in self.sizes.windows(2) {
            out.push((at, at + w[0] * w[1]));
            at += w[0] * w[1] + w[1];
        }
        out
    }

    /// Scaled normal initialization: std `1/sqrt(fan_in)` for hidden layers and
    /// `output_gain/sqrt(fan_in)` for the output layer; zero biases.
    pub fn init<R: Rng>(&self, theta: &mut [f64], output_gain: f64, rng: &mut R) {
        let n_layers = self.sizes.len() - 1;
        for (l, (w_at, b_at)) in self.layer_offsets().into_iter().enumerate() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let gain = if l + 1 == n_layers { output_gain } else { 1.0 };
            let std = gain / (fan_in as f64).sqrt();
            for v in &mut theta[w_at..w_at + fan_in * fan_out] {
                let z: f64 = rng.sample(StandardNormal);
                *v = std * z;
            }
            theta[b_at..b_at + fan_out].iter_mut().for_each(|b| *b = 0.0);
        }
    }

    pub fn forward(&self, theta: &[f64], x: &[f64], acts: &mut Activations) {
        debug_assert_eq!(x.len(), self.input_dim());
        let n_layers = self.sizes.len() - 1;
        acts.layers.resize_with(n_layers + 1, Vec::new);
        acts.layers[0].clear();
        acts.layers[0].extend_from_slice(x);
        for (l, (w_at, b_at)) in self.layer_offsets().into_iter().enumerate() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (prev, rest) = acts.layers.split_at_mut(l + 1);
            let input = &prev[l];
            let out = &mut rest[0];
            out.clear();
            let w = &theta[w_at..w_at + n_in * n_out];
            let b = &theta[b_at..b_at + n_out];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                out.push(if l + 1 < n_layers { z.tanh() } else { z });
            }
        }
    }

    /// Accumulates `d loss / d theta` into `grad` given `d loss / d output`.
    pub fn backward(&self, theta: &[f64], acts: &mut Activations, d_out: &[f64], grad: &mut [f64]) {
        let n_layers = self.sizes.len() - 1;
        let offsets = self.layer_offsets();
        acts.delta.clear();
        acts.delta.extend_from_slice(d_out);
        for l in (0..n_layers).rev() {
            let (w_at, b_at) = offsets[l];
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = &acts.layers[l];
            for o in 0..n_out {
                let d = acts.delta[o];
                grad[b_at + o] += d;
                let g_row = &mut grad[w_at + o * n_in..w_at + (o + 1) * n_in];
                for (g, a) in g_row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l > 0 {
                let w = &theta[w_at..w_at + n_in * n_out];
                acts.scratch.clear();
                acts.scratch.resize(n_in, 0.0);
                for o in 0..n_out {
                    let d = acts.delta[o];
                    let row = &w[o * n_in..(o + 1) * n_in];
                    for (s, wv) in acts.scratch.iter_mut().zip(row) {
                        *s += d * wv;
                    }
                }
                // tanh'(z) = 1 - tanh(z)^2
                for (s, a) in acts.scratch.iter_mut().zip(input) {
                    *s *= 1.0 - a * a;
                }
                std::mem::swap(&mut acts.delta, &mut acts.scratch);
            }
        }
    }

    /// Weight and bias blocks with their shapes, for serialization.
    pub fn export(&self, theta: &[f64]) -> Vec<LayerWeights> {
        self.layer_offsets()
            .into_iter()
            .enumerate()
            .map(|(l, (w_at, b_at))| {
                let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
                LayerWeights {
                    shape: [n_out, n_in],
                    weights: theta[w_at..w_at + n_in * n_out].to_vec(),
                    bias: theta[b_at..b_at + n_out].to_vec(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    /// `[outputs, inputs]`; `weights` is row major.
    pub shape: [usize; 2],
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Rescales `grad` so its Euclidean norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / (norm + 1e-6);
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::task_rng;

    #[test]
    fn backward_matches_finite_differences() {
        let net = Mlp::new(vec![3, 5, 4, 2], 0);
        let mut theta = vec![0.0; net.param_count()];
        net.init(&mut theta, 1.0, &mut task_rng(1, 0, 0));
        let x = [0.3, -0.7, 1.1];
        let weights = [0.6, -1.3];
        let loss = |th: &[f64]| {
            let mut a = Activations::default();
            net.forward(th, &x, &mut a);
            a.output().iter().zip(weights).map(|(o, w)| o * w).sum::<f64>()
        };
        let mut acts = Activations::default();
        net.forward(&theta, &x, &mut acts);
        let mut grad = vec![0.0; theta.len()];
        net.backward(&theta, &mut acts, &weights, &mut grad);
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut p = theta.clone();
            let mut m = theta.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-8, "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn export_shapes() {
        let net = Mlp::new(vec![8, 4, 3], 10);
        let theta = vec![0.5; 10 + net.param_count()];
        let layers = net.export(&theta);
        assert_eq!(layers[0].shape, [4, 8]);
        assert_eq!(layers[1].shape, [3, 4]);
        assert_eq!(layers[1].weights.len(), 12);
    }

    #[test]
    fn clipping() {
        let mut g = vec![30.0, 40.0];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 50.0);
        assert!((g.iter().map(|v| v * v).sum::<f64>().sqrt() - 10.0).abs() < 1e-5);
        let mut small = vec![1.0, 1.0];
        clip_grad_norm(&mut small, 10.0);
        assert_eq!(small, vec![1.0, 1.0]);
    }
}
