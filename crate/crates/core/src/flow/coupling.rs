//! Affine coupling layer: copies one block of coordinates and applies an
//! elementwise affine map to the rest, conditioned on the copied block.

use serde::{Deserialize, Serialize};

use super::net::{NetCache, SmallNet};
use crate::error::{EmflowError, Result};

/// Bound on scale outputs: `s = λ·tanh(s_raw/λ)`.
pub const SCALE_CLAMP: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    /// Position of this layer in its flow, used for error reporting.
    pub index: usize,
    pub pass_idx: Vec<usize>,
    pub transform_idx: Vec<usize>,
    pub scale_net: SmallNet,
    pub shift_net: SmallNet,
}

/// Values recorded by a taped pass, needed for the backward sweep.
#[derive(Debug, Clone)]
pub struct LayerTape {
    scale_cache: NetCache,
    shift_cache: NetCache,
    /// tanh(s_raw/λ) per transformed coordinate.
    squash: Vec<f64>,
    exp_s: Vec<f64>,
    /// Transformed coordinates on the data side of the map (forward input /
    /// inverse output).
    x_transform: Vec<f64>,
}

impl CouplingLayer {
    pub fn p(&self) -> usize {
        self.pass_idx.len() + self.transform_idx.len()
    }

    pub fn num_params(&self) -> usize {
        self.scale_net.num_params() + self.shift_net.num_params()
    }

    /// True when the partition is a proper split of `0..p` and the nets fit it.
    pub fn is_valid(&self) -> bool {
        let p = self.p();
        let mut seen = vec![false; p];
        for &j in self.pass_idx.iter().chain(&self.transform_idx) {
            if j >= p || seen[j] {
                return false;
            }
            seen[j] = true;
        }
        !self.pass_idx.is_empty()
            && !self.transform_idx.is_empty()
            && self.scale_net.is_consistent()
            && self.shift_net.is_consistent()
            && self.scale_net.input_dim() == self.pass_idx.len()
            && self.shift_net.input_dim() == self.pass_idx.len()
            && self.scale_net.output_dim() == self.transform_idx.len()
            && self.shift_net.output_dim() == self.transform_idx.len()
    }

    fn conditioner(&self, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>, NetCache, NetCache)> {
        let cond: Vec<f64> = self.pass_idx.iter().map(|&j| v[j]).collect();
        let (s_raw, scale_cache) = self.scale_net.forward_cached(&cond);
        let (t, shift_cache) = self.shift_net.forward_cached(&cond);
        if s_raw.iter().chain(&t).any(|x| !x.is_finite()) {
            return Err(EmflowError::NonFiniteLayer { layer: self.index });
        }
        let squash = s_raw.iter().map(|s| (s / SCALE_CLAMP).tanh()).collect();
        Ok((squash, t, scale_cache, shift_cache))
    }

    fn check_output(&self, out: &[f64]) -> Result<()> {
        if out.iter().any(|v| !v.is_finite()) {
            return Err(EmflowError::NonFiniteLayer { layer: self.index });
        }
        Ok(())
    }

    /// y_T = x_T ⊙ exp(s(x_P)) + t(x_P); log-det = Σ s.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.forward_taped(x).map(|(y, ld, _)| (y, ld))
    }

    pub fn forward_taped(&self, x: &[f64]) -> Result<(Vec<f64>, f64, LayerTape)> {
        let (squash, t, scale_cache, shift_cache) = self.conditioner(x)?;
        let mut y = x.to_vec();
        let mut log_det = 0.0;
        let mut exp_s = Vec::with_capacity(squash.len());
        let mut x_transform = Vec::with_capacity(squash.len());
        for (k, &j) in self.transform_idx.iter().enumerate() {
            let s = SCALE_CLAMP * squash[k];
            let e = s.exp();
            y[j] = x[j] * e + t[k];
            log_det += s;
            exp_s.push(e);
            x_transform.push(x[j]);
        }
        self.check_output(&y)?;
        Ok((
            y,
            log_det,
            LayerTape {
                scale_cache,
                shift_cache,
                squash,
                exp_s,
                x_transform,
            },
        ))
    }

    /// x_T = (y_T − t(y_P)) ⊙ exp(−s(y_P)); log-det = −Σ s.
    pub fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.inverse_taped(y).map(|(x, ld, _)| (x, ld))
    }

    pub fn inverse_taped(&self, y: &[f64]) -> Result<(Vec<f64>, f64, LayerTape)> {
        let (squash, t, scale_cache, shift_cache) = self.conditioner(y)?;
        let mut x = y.to_vec();
        let mut log_det = 0.0;
        let mut exp_s = Vec::with_capacity(squash.len());
        let mut x_transform = Vec::with_capacity(squash.len());
        for (k, &j) in self.transform_idx.iter().enumerate() {
            let s = SCALE_CLAMP * squash[k];
            let e = s.exp();
            x[j] = (y[j] - t[k]) / e;
            log_det -= s;
            exp_s.push(e);
            x_transform.push(x[j]);
        }
        self.check_output(&x)?;
        Ok((
            x,
            log_det,
            LayerTape {
                scale_cache,
                shift_cache,
                squash,
                exp_s,
                x_transform,
            },
        ))
    }

    fn backprop_nets(
        &self,
        tape: &LayerTape,
        g_s: &[f64],
        g_t: &[f64],
        grad: &mut [f64],
        g_cond_out: &mut [f64],
    ) {
        let g_raw: Vec<f64> = g_s
            .iter()
            .zip(&tape.squash)
            .map(|(g, q)| g * (1.0 - q * q))
            .collect();
        let (g_scale, g_shift) = grad.split_at_mut(self.scale_net.num_params());
        let gc_s = self.scale_net.backward(&tape.scale_cache, &g_raw, g_scale);
        let gc_t = self.shift_net.backward(&tape.shift_cache, g_t, g_shift);
        for (k, &j) in self.pass_idx.iter().enumerate() {
            g_cond_out[j] += gc_s[k] + gc_t[k];
        }
    }

    /// Backward sweep of a taped forward pass. `grad` is this layer's slice of
    /// the flow gradient; returns ∂L/∂x.
    pub fn backward_forward(
        &self,
        tape: &LayerTape,
        g_y: &[f64],
        g_ld: f64,
        grad: &mut [f64],
    ) -> Vec<f64> {
        let mut g_x = vec![0.0; g_y.len()];
        for &j in &self.pass_idx {
            g_x[j] = g_y[j];
        }
        let m = self.transform_idx.len();
        let mut g_s = Vec::with_capacity(m);
        let mut g_t = Vec::with_capacity(m);
        for (k, &j) in self.transform_idx.iter().enumerate() {
            let e = tape.exp_s[k];
            g_x[j] = g_y[j] * e;
            g_s.push(g_y[j] * tape.x_transform[k] * e + g_ld);
            g_t.push(g_y[j]);
        }
        self.backprop_nets(tape, &g_s, &g_t, grad, &mut g_x);
        g_x
    }

    /// Backward sweep of a taped inverse pass; returns ∂L/∂y.
    pub fn backward_inverse(
        &self,
        tape: &LayerTape,
        g_x: &[f64],
        g_ld: f64,
        grad: &mut [f64],
    ) -> Vec<f64> {
        let mut g_y = vec![0.0; g_x.len()];
        for &j in &self.pass_idx {
            g_y[j] = g_x[j];
        }
        let m = self.transform_idx.len();
        let mut g_s = Vec::with_capacity(m);
        let mut g_t = Vec::with_capacity(m);
        for (k, &j) in self.transform_idx.iter().enumerate() {
            let inv_e = 1.0 / tape.exp_s[k];
            g_y[j] = g_x[j] * inv_e;
            g_t.push(-g_x[j] * inv_e);
            g_s.push(-g_x[j] * tape.x_transform[k] - g_ld);
        }
        self.backprop_nets(tape, &g_s, &g_t, grad, &mut g_y);
        g_y
    }
}
