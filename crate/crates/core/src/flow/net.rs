//! Fully connected scale/shift network with manual reverse-mode gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

/// Dense network `in → hidden → … → out` with tanh on every hidden layer and
/// a linear output layer. Parameters live in one flat vector: for each layer,
/// the row-major `out×in` weight matrix followed by the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallNet {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Activations recorded during a forward pass; `acts[0]` is the input and
/// `acts[l]` for hidden `l` holds post-tanh values.
#[derive(Debug, Clone)]
pub struct NetCache {
    acts: Vec<Vec<f64>>,
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl SmallNet {
    pub fn zeros(widths: Vec<usize>) -> Self {
        assert!(widths.len() >= 2, "a network needs input and output widths");
        let n = param_count(&widths);
        Self {
            widths,
            activation: Activation::Tanh,
            params: vec![0.0; n],
        }
    }

    /// Glorot-uniform hidden layers, zero output layer (so the net outputs 0).
    pub fn init<R: Rng + ?Sized>(widths: Vec<usize>, rng: &mut R) -> Self {
        let mut net = Self::zeros(widths);
        let last = net.widths.len() - 2;
        let mut off = 0;
        for l in 0..=last {
            let (fan_in, fan_out) = (net.widths[l], net.widths[l + 1]);
            if l < last {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for w in &mut net.params[off..off + fan_in * fan_out] {
                    *w = rng.random_range(-limit..limit);
                }
            }
            off += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Checks that the stored parameter count matches the declared widths.
    pub fn is_consistent(&self) -> bool {
        self.widths.len() >= 2 && self.params.len() == param_count(&self.widths)
    }

    fn affine(&self, off: usize, fan_in: usize, fan_out: usize, x: &[f64]) -> Vec<f64> {
        let w = &self.params[off..off + fan_in * fan_out];
        let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        (0..fan_out)
            .map(|r| {
                w[r * fan_in..(r + 1) * fan_in]
                    .iter()
                    .zip(x)
                    .fold(b[r], |acc, (wi, xi)| acc + wi * xi)
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, NetCache) {
        debug_assert_eq!(x.len(), self.input_dim());
        let layers = self.widths.len() - 1;
        let mut acts = Vec::with_capacity(layers);
        acts.push(x.to_vec());
        let mut off = 0;
        let mut out = Vec::new();
        for l in 0..layers {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let mut h = self.affine(off, fan_in, fan_out, &acts[l]);
            off += fan_in * fan_out + fan_out;
            if l + 1 < layers {
                h.iter_mut().for_each(|v| *v = v.tanh());
                acts.push(h);
            } else {
                out = h;
            }
        }
        (out, NetCache { acts })
    }

    /// Accumulates parameter gradients into `grad` (same layout as the
    /// parameters) and returns the gradient with respect to the input.
    pub fn backward(&self, cache: &NetCache, g_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.params.len());
        let layers = self.widths.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        let mut g = g_out.to_vec();
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let off = offsets[l];
            let input = &cache.acts[l];
            let w = &self.params[off..off + fan_in * fan_out];
            {
                let (gw, gb) =
                    grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for r in 0..fan_out {
                    gb[r] += g[r];
                    let row = &mut gw[r * fan_in..(r + 1) * fan_in];
                    for (gwi, xi) in row.iter_mut().zip(input) {
                        *gwi += g[r] * xi;
                    }
                }
            }
            let mut g_in = vec![0.0; fan_in];
            for r in 0..fan_out {
                let gr = g[r];
                for (gi, wi) in g_in.iter_mut().zip(&w[r * fan_in..(r + 1) * fan_in]) {
                    *gi += gr * wi;
                }
            }
            if l > 0 {
                // input to this layer is a tanh output
                for (gi, a) in g_in.iter_mut().zip(input) {
                    *gi *= 1.0 - a * a;
                }
            }
            g = g_in;
        }
        g
    }
}
