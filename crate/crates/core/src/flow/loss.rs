//! Training losses of the flow and their exact gradients.
//!
//! Batches are flat row-major slices. The likelihood loss maps data rows to
//! the latent space and scores them under the base Gaussian; the composite
//! loss scores reconstructions `f(ẑ)` of imputed latent rows and penalizes
//! their deviation from the current imputation on observed coordinates.

use super::optim::Adam;
use super::{log_likelihood, FlowModel};
use crate::error::{EmflowError, Result};
use crate::exec::Execution;
use crate::gaussian::{FactoredGaussian, GaussianParams};
use serde::{Deserialize, Serialize};

/// How the likelihood term of the composite loss is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompositeGradient {
    /// Reconstructions are treated as data for the likelihood term, so it
    /// fits the density to them; only the reconstruction penalty is
    /// differentiated through x̃ = f(ẑ).
    #[default]
    Detached,
    /// Total derivative through x̃ = f(ẑ). With ẑ fixed the likelihood term
    /// reduces to −log|det ∂f/∂z(ẑ)|, which has no minimum.
    Total,
}

/// Inputs for one gradient step.
#[derive(Debug, Clone, Copy)]
pub enum LossBatch<'a> {
    /// Negative mean log-likelihood of current imputed rows.
    Likelihood { data: &'a [f64] },
    /// Composite loss on reconstructions `f(latent)`.
    Composite {
        latent: &'a [f64],
        current: &'a [f64],
        masks: &'a [bool],
        alpha: f64,
        gradient: CompositeGradient,
    },
}

fn rows(len: usize, p: usize) -> Result<usize> {
    if p == 0 || len == 0 || !len.is_multiple_of(p) {
        return Err(EmflowError::Shape(format!(
            "{len} values do not form rows of length {p}"
        )));
    }
    Ok(len / p)
}

fn sum_chunks(parts: Vec<Result<f64>>) -> Result<f64> {
    parts.into_iter().try_fold(0.0, |acc, r| r.map(|v| acc + v))
}

/// −(1/|B|) Σ log p_X(xᵢ).
pub fn loss_l1(
    batch: &[f64],
    flow: &FlowModel,
    base: &GaussianParams,
    exec: Execution,
) -> Result<f64> {
    let p = flow.p();
    let b = rows(batch.len(), p)?;
    let fg = base.factor()?;
    let total = sum_chunks(exec.map_chunks(b, |range| {
        range
            .map(|i| log_likelihood(&batch[i * p..(i + 1) * p], flow, &fg))
            .sum::<Result<f64>>()
    }))?;
    Ok(-total / b as f64)
}

/// Squared error over observed coordinates only.
pub fn reconstruction_error(reconstructed: &[f64], current: &[f64], missing: &[bool]) -> f64 {
    reconstructed
        .iter()
        .zip(current)
        .zip(missing)
        .filter(|(_, &m)| !m)
        .map(|((a, b), _)| (a - b) * (a - b))
        .sum()
}

/// −(1/|B|) Σ [log p_X(x̃ᵢ) − α·Σⱼ (1−mᵢⱼ)(x̃ᵢⱼ − x̂ᵢⱼ)²].
#[allow(clippy::too_many_arguments)]
pub fn loss_l2(
    reconstructed: &[f64],
    current: &[f64],
    masks: &[bool],
    flow: &FlowModel,
    base: &GaussianParams,
    alpha: f64,
    exec: Execution,
) -> Result<f64> {
    let p = flow.p();
    let b = rows(reconstructed.len(), p)?;
    if current.len() != reconstructed.len() || masks.len() != reconstructed.len() {
        return Err(EmflowError::Shape(
            "reconstructed, current and masks differ in size".into(),
        ));
    }
    if alpha < 0.0 {
        return Err(EmflowError::InvalidArgument(format!(
            "alpha must be >= 0, got {alpha}"
        )));
    }
    let fg = base.factor()?;
    let total = sum_chunks(exec.map_chunks(b, |range| {
        range
            .map(|i| {
                let r = i * p..(i + 1) * p;
                let ll = log_likelihood(&reconstructed[r.clone()], flow, &fg)?;
                Ok(ll
                    - alpha
                        * reconstruction_error(
                            &reconstructed[r.clone()],
                            &current[r.clone()],
                            &masks[r],
                        ))
            })
            .sum::<Result<f64>>()
    }))?;
    Ok(-total / b as f64)
}

/// Loss value and its gradient with respect to every flow parameter.
///
/// For the total composite gradient, log p_X(f(ẑ)) = log N(ẑ) − log|det
/// ∂f/∂z(ẑ)| holds identically in the parameters, so it is taken through the
/// forward pass only.
pub fn loss_and_grad(
    flow: &FlowModel,
    base: &FactoredGaussian,
    batch: LossBatch<'_>,
    exec: Execution,
) -> Result<(f64, Vec<f64>)> {
    let p = flow.p();
    let n_params = flow.num_params();
    let parts = match batch {
        LossBatch::Likelihood { data } => {
            let b = rows(data.len(), p)?;
            let w = 1.0 / b as f64;
            exec.map_chunks(b, |range| -> Result<(f64, Vec<f64>)> {
                let mut grad = vec![0.0; n_params];
                let mut loss = 0.0;
                for i in range {
                    let (z, ld, tape) = flow.inverse_taped(&data[i * p..(i + 1) * p])?;
                    let (lp, gz) = base.log_density_and_grad(&z);
                    loss -= (lp + ld) * w;
                    let g_z: Vec<f64> = gz.iter().map(|g| -g * w).collect();
                    flow.backward_inverse(&tape, &g_z, -w, &mut grad);
                }
                Ok((loss, grad))
            })
        }
        LossBatch::Composite {
            latent,
            current,
            masks,
            alpha,
            gradient,
        } => {
            let b = rows(latent.len(), p)?;
            if current.len() != latent.len() || masks.len() != latent.len() {
                return Err(EmflowError::Shape(
                    "latent, current and masks differ in size".into(),
                ));
            }
            let w = 1.0 / b as f64;
            exec.map_chunks(b, |range| -> Result<(f64, Vec<f64>)> {
                let mut grad = vec![0.0; n_params];
                let mut loss = 0.0;
                for i in range {
                    let r = i * p..(i + 1) * p;
                    let (xt, ld_f, tape) = flow.forward_taped(&latent[r.clone()])?;
                    let cur = &current[r.clone()];
                    let miss = &masks[r.clone()];
                    let rec = reconstruction_error(&xt, cur, miss);
                    let g_x: Vec<f64> = (0..p)
                        .map(|j| {
                            if miss[j] {
                                0.0
                            } else {
                                2.0 * alpha * (xt[j] - cur[j]) * w
                            }
                        })
                        .collect();
                    match gradient {
                        CompositeGradient::Total => {
                            let lp = base.log_density(&latent[r]);
                            loss -= (lp - ld_f - alpha * rec) * w;
                            flow.backward_forward(&tape, &g_x, w, &mut grad);
                        }
                        CompositeGradient::Detached => {
                            flow.backward_forward(&tape, &g_x, 0.0, &mut grad);
                            let (z, ld, inv_tape) = flow.inverse_taped(&xt)?;
                            let (lp, gz) = base.log_density_and_grad(&z);
                            loss -= (lp + ld - alpha * rec) * w;
                            let g_z: Vec<f64> = gz.iter().map(|g| -g * w).collect();
                            flow.backward_inverse(&inv_tape, &g_z, -w, &mut grad);
                        }
                    }
                }
                Ok((loss, grad))
            })
        }
    };
    let mut loss = 0.0;
    let mut grad = vec![0.0; n_params];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// One optimizer step on all flow parameters. Returns the pre-step loss.
pub fn grad_step(
    flow: &mut FlowModel,
    base: &FactoredGaussian,
    batch: LossBatch<'_>,
    optimizer: &mut Adam,
    exec: Execution,
) -> Result<f64> {
    let (loss, grad) = loss_and_grad(flow, base, batch, exec)?;
    for (layer, range) in flow.layer_ranges().into_iter().enumerate() {
        if grad[range].iter().any(|g| !g.is_finite()) {
            return Err(EmflowError::NonFiniteGradient { layer });
        }
    }
    let mut params = flow.params();
    optimizer.step(&mut params, &grad);
    flow.set_params(&params)?;
    Ok(loss)
}
