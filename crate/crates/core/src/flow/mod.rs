//! RealNVP-style normalizing flow built from affine coupling layers.
//!
//! The flow maps latent points to data space (`forward`) and back
//! (`inverse`). Gradients of the training losses are computed by taping the
//! passes and sweeping them backwards by hand; see [`loss`].

pub mod coupling;
pub mod loss;
pub mod net;
pub mod optim;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use coupling::{CouplingLayer, LayerTape, SCALE_CLAMP};
pub use loss::{grad_step, loss_and_grad, loss_l1, loss_l2, CompositeGradient, LossBatch};
pub use net::{Activation, SmallNet};
pub use optim::Adam;

use crate::error::{EmflowError, Result};
use crate::gaussian::FactoredGaussian;

/// Default coupling depth.
pub const DEFAULT_DEPTH: usize = 6;

/// Hidden width for the scale/shift nets: max(32, 4p), capped at 256.
pub fn default_hidden(p: usize) -> usize {
    (4 * p).clamp(32, 256)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionScheme {
    /// Even layers pass the first ⌈p/2⌉ coordinates, odd layers the rest.
    AlternatingHalves,
}

impl PartitionScheme {
    pub fn split(self, p: usize, layer: usize) -> (Vec<usize>, Vec<usize>) {
        match self {
            PartitionScheme::AlternatingHalves => {
                let d = p.div_ceil(2);
                let (first, second) = ((0..d).collect::<Vec<_>>(), (d..p).collect::<Vec<_>>());
                if layer.is_multiple_of(2) {
                    (first, second)
                } else {
                    (second, first)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    p: usize,
    hidden: usize,
    partition: PartitionScheme,
    layers: Vec<CouplingLayer>,
}

/// Per-layer tapes of a flow pass, in application order.
#[derive(Debug, Clone)]
pub struct FlowTape {
    layers: Vec<LayerTape>,
}

/// Fresh flow with zero-initialized output layers, so it starts as the identity.
pub fn reinit_flow(p: usize, depth: usize, hidden: usize, seed: u64) -> Result<FlowModel> {
    FlowModel::new(p, depth, hidden, seed)
}

impl FlowModel {
    pub fn new(p: usize, depth: usize, hidden: usize, seed: u64) -> Result<Self> {
        if p < 2 || depth < 1 || hidden < 1 {
            return Err(EmflowError::InvalidArgument(format!(
                "flow needs p >= 2, depth >= 1 and hidden >= 1 (got p={p}, depth={depth}, hidden={hidden})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let partition = PartitionScheme::AlternatingHalves;
        let layers = (0..depth)
            .map(|index| {
                let (pass_idx, transform_idx) = partition.split(p, index);
                let widths = vec![pass_idx.len(), hidden, hidden, transform_idx.len()];
                CouplingLayer {
                    index,
                    scale_net: SmallNet::init(widths.clone(), &mut rng),
                    shift_net: SmallNet::init(widths, &mut rng),
                    pass_idx,
                    transform_idx,
                }
            })
            .collect();
        Ok(Self {
            p,
            hidden,
            partition,
            layers,
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn partition(&self) -> PartitionScheme {
        self.partition
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(EmflowError::InvalidArgument("flow has no layers".into()));
        }
        for l in &self.layers {
            if l.p() != self.p || !l.is_valid() {
                return Err(EmflowError::InvalidArgument(format!(
                    "coupling layer {} is malformed",
                    l.index
                )));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(CouplingLayer::num_params).sum()
    }

    /// Ranges of each layer's parameters in the flat parameter vector.
    pub fn layer_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.layers
            .iter()
            .map(|l| {
                let r = start..start + l.num_params();
                start = r.end;
                r
            })
            .collect()
    }

    /// All parameters, layer by layer (scale net, then shift net).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.scale_net.params());
            out.extend_from_slice(l.shift_net.params());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(EmflowError::Shape(format!(
                "expected {} flow parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            for net in [&mut l.scale_net, &mut l.shift_net] {
                let n = net.num_params();
                net.params_mut().copy_from_slice(&params[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.p {
            return Err(EmflowError::Shape(format!(
                "flow has dimension {}, got a vector of length {}",
                self.p,
                v.len()
            )));
        }
        Ok(())
    }

    /// Latent → data.
    pub fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_len(z)?;
        let mut x = z.to_vec();
        let mut log_det = 0.0;
        for l in &self.layers {
            let (y, ld) = l.forward(&x)?;
            x = y;
            log_det += ld;
        }
        Ok((x, log_det))
    }

    /// Data → latent; the returned log-det is log|det ∂f⁻¹/∂x|.
    pub fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_len(x)?;
        let mut z = x.to_vec();
        let mut log_det = 0.0;
        for l in self.layers.iter().rev() {
            let (y, ld) = l.inverse(&z)?;
            z = y;
            log_det += ld;
        }
        Ok((z, log_det))
    }

    pub fn forward_taped(&self, z: &[f64]) -> Result<(Vec<f64>, f64, FlowTape)> {
        self.check_len(z)?;
        let mut x = z.to_vec();
        let mut log_det = 0.0;
        let mut tapes = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (y, ld, tape) = l.forward_taped(&x)?;
            x = y;
            log_det += ld;
            tapes.push(tape);
        }
        Ok((x, log_det, FlowTape { layers: tapes }))
    }

    /// Tapes are stored in application order (last layer first).
    pub fn inverse_taped(&self, x: &[f64]) -> Result<(Vec<f64>, f64, FlowTape)> {
        self.check_len(x)?;
        let mut z = x.to_vec();
        let mut log_det = 0.0;
        let mut tapes = Vec::with_capacity(self.layers.len());
        for l in self.layers.iter().rev() {
            let (y, ld, tape) = l.inverse_taped(&z)?;
            z = y;
            log_det += ld;
            tapes.push(tape);
        }
        Ok((z, log_det, FlowTape { layers: tapes }))
    }

    /// Accumulates ∂L/∂ψ into `grad` for a taped forward pass, given ∂L/∂x
    /// and ∂L/∂(log-det). Returns ∂L/∂z.
    pub fn backward_forward(
        &self,
        tape: &FlowTape,
        g_x: &[f64],
        g_ld: f64,
        grad: &mut [f64],
    ) -> Vec<f64> {
        let ranges = self.layer_ranges();
        let mut g = g_x.to_vec();
        for (k, l) in self.layers.iter().enumerate().rev() {
            g = l.backward_forward(&tape.layers[k], &g, g_ld, &mut grad[ranges[k].clone()]);
        }
        g
    }

    /// Same for a taped inverse pass; returns ∂L/∂x.
    pub fn backward_inverse(
        &self,
        tape: &FlowTape,
        g_z: &[f64],
        g_ld: f64,
        grad: &mut [f64],
    ) -> Vec<f64> {
        let ranges = self.layer_ranges();
        let depth = self.layers.len();
        let mut g = g_z.to_vec();
        // tape.layers[0] belongs to the last layer, so layer k sits at depth-1-k
        for k in 0..depth {
            let tape_k = &tape.layers[depth - 1 - k];
            g = self.layers[k].backward_inverse(tape_k, &g, g_ld, &mut grad[ranges[k].clone()]);
        }
        g
    }
}

pub fn flow_forward(flow: &FlowModel, z: &[f64]) -> Result<(Vec<f64>, f64)> {
    flow.forward(z)
}

pub fn flow_inverse(flow: &FlowModel, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    flow.inverse(x)
}

/// log p_X(x) = log N(f⁻¹(x); μ, Σ) + log|det ∂f⁻¹/∂x|.
pub fn log_likelihood(x: &[f64], flow: &FlowModel, base: &FactoredGaussian) -> Result<f64> {
    if base.dim() != flow.p() {
        return Err(EmflowError::Shape("base and flow dimensions differ".into()));
    }
    let (z, log_det) = flow.inverse(x)?;
    Ok(base.log_density(&z) + log_det)
}
