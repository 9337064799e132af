//! Full-batch EM for a multivariate Gaussian with missing entries.
//!
//! Serves as a linear imputation baseline in data space and as the fixed
//! point that online EM is checked against.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{DataMatrix, ImputedDataset, MaskMatrix};
use crate::error::{EmflowError, Result};
use crate::exec::Execution;
use crate::gaussian::{batch_em_estimates, impute_batch, observed_log_likelihood, GaussianParams};
use crate::online_em::robustify;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 500;
const INIT_BETA: f64 = 1e-2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchEmFit {
    pub params: GaussianParams,
    pub iterations: usize,
    pub converged: bool,
    /// Observed-data log-likelihood of the initial params and after each iteration.
    pub log_likelihood: Vec<f64>,
}

fn check(data: &DataMatrix, mask: &MaskMatrix) -> Result<()> {
    if data.n() != mask.n() || data.p() != mask.p() {
        return Err(EmflowError::Shape("data and mask shapes differ".into()));
    }
    for j in 0..data.p() {
        if mask.observed_in_column(j) == 0 {
            return Err(EmflowError::NoObservedEntries {
                feature: j,
                name: data.feature_name(j),
            });
        }
    }
    Ok(())
}

/// Observed column means and an inflated diagonal covariance of observed values.
pub fn default_init(data: &DataMatrix, mask: &MaskMatrix) -> Result<GaussianParams> {
    check(data, mask)?;
    let p = data.p();
    let mut mean = DVector::zeros(p);
    let mut var = DMatrix::zeros(p, p);
    for j in 0..p {
        let vals: Vec<f64> = (0..data.n())
            .filter(|&i| !mask.is_missing(i, j))
            .map(|i| data.get(i, j))
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        mean[j] = m;
        var[(j, j)] = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
    }
    GaussianParams::new(mean, robustify(&var, INIT_BETA))
}

/// Iterates conditional-mean imputation and re-estimation until
/// ‖Δμ‖_∞ + ‖ΔΣ‖_max < tol or `max_iter` iterations.
pub fn batch_em_fit(
    data: &DataMatrix,
    mask: &MaskMatrix,
    init: GaussianParams,
    max_iter: usize,
    tol: f64,
    exec: Execution,
) -> Result<BatchEmFit> {
    check(data, mask)?;
    let p = data.p();
    if init.dim() != p {
        return Err(EmflowError::Shape(
            "initial params do not match data dimension".into(),
        ));
    }
    let (z, m) = (data.as_slice(), mask.as_slice());
    let mut params = init;
    let mut log_likelihood = vec![observed_log_likelihood(z, m, p, &params, exec)?];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        let (mean, cov, _) = batch_em_estimates(z, m, p, &params, exec)?;
        let next = GaussianParams::new(mean, cov)?;
        iterations += 1;
        let delta = (next.mean() - params.mean()).amax() + (next.cov() - params.cov()).amax();
        params = next;
        log_likelihood.push(observed_log_likelihood(z, m, p, &params, exec)?);
        log::trace!("batch EM iteration {iterations}: delta {delta:e}");
        if delta < tol {
            converged = true;
            break;
        }
    }
    Ok(BatchEmFit {
        params,
        iterations,
        converged,
        log_likelihood,
    })
}

/// Conditional-mean imputation of every row under `params`.
pub fn batch_em_impute(
    data: &DataMatrix,
    mask: &MaskMatrix,
    params: &GaussianParams,
    exec: Execution,
) -> Result<ImputedDataset> {
    let imputed = impute_batch(data.as_slice(), mask.as_slice(), data.p(), params, exec)?;
    let mut out = ImputedDataset::from_source(data, mask)?;
    for (i, row) in imputed.chunks_exact(data.p()).enumerate() {
        out.fill_missing(i, row);
    }
    Ok(out)
}

/// Fits with the default initialization and tolerances, then imputes.
pub fn fit_and_impute(
    data: &DataMatrix,
    mask: &MaskMatrix,
    exec: Execution,
) -> Result<(BatchEmFit, ImputedDataset)> {
    let fit = batch_em_fit(
        data,
        mask,
        default_init(data, mask)?,
        DEFAULT_MAX_ITER,
        DEFAULT_TOL,
        exec,
    )?;
    let imputed = batch_em_impute(data, mask, &fit.params, exec)?;
    Ok((fit, imputed))
}
