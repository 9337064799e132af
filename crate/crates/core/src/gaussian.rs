//! Full-covariance multivariate Gaussian: densities, conditionals given an
//! observed sub-vector, conditional-mean imputation and the EM maximizers.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{EmflowError, Result};
use crate::exec::Execution;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative jitter steps tried when a covariance fails to factor.
const JITTER_STEPS: [f64; 3] = [1e-10, 1e-8, 1e-6];

/// Replaces `m` with `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn jitter_scale(m: &DMatrix<f64>) -> f64 {
    let s = m.trace() / m.nrows() as f64;
    if s.is_finite() && s > 0.0 {
        s
    } else {
        1.0
    }
}

/// Cholesky factor of `m`, adding `ε·trace(m)/p·I` with escalating ε when the
/// plain factorization fails. Returns the factor and the diagonal shift used.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if m.iter().all(|v| v.is_finite()) {
        if let Some(c) = m.clone().cholesky() {
            return Ok((c, 0.0));
        }
        let scale = jitter_scale(m);
        for eps in JITTER_STEPS {
            let shift = eps * scale;
            let mut shifted = m.clone();
            for i in 0..m.nrows() {
                shifted[(i, i)] += shift;
            }
            if let Some(c) = shifted.cholesky() {
                return Ok((c, shift));
            }
        }
        return Err(EmflowError::NotPositiveDefinite {
            min_eigenvalue: min_eigenvalue(m),
        });
    }
    Err(EmflowError::NotPositiveDefinite {
        min_eigenvalue: f64::NAN,
    })
}

/// Symmetrizes and, if needed, shifts the diagonal so the matrix factors.
pub fn make_pd(mut m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    symmetrize(&mut m);
    let (_, shift) = cholesky_jittered(&m)?;
    for i in 0..m.nrows() {
        m[(i, i)] += shift;
    }
    Ok(m)
}

/// Latent base distribution N(μ, Σ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianParams {
    /// Validates shapes, symmetrizes and jitters `cov` to positive definite.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let p = mean.len();
        if cov.nrows() != p || cov.ncols() != p {
            return Err(EmflowError::Shape(format!(
                "mean has length {p} but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if p == 0 {
            return Err(EmflowError::Shape("empty Gaussian".into()));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(EmflowError::InvalidArgument("non-finite mean".into()));
        }
        Ok(Self {
            mean,
            cov: make_pd(cov)?,
        })
    }

    pub fn standard(p: usize) -> Self {
        Self {
            mean: DVector::zeros(p),
            cov: DMatrix::identity(p, p),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn factor(&self) -> Result<FactoredGaussian> {
        FactoredGaussian::new(self)
    }
}

/// A Gaussian with its covariance factored once, for repeated evaluation.
#[derive(Debug, Clone)]
pub struct FactoredGaussian {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl FactoredGaussian {
    pub fn new(params: &GaussianParams) -> Result<Self> {
        let (chol, _) = cholesky_jittered(&params.cov)?;
        let p = params.dim() as f64;
        let half_logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        Ok(Self {
            mean: params.mean.clone(),
            chol,
            log_norm: -0.5 * p * LN_2PI - half_logdet,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn whitened(&self, z: &[f64]) -> DVector<f64> {
        let mut r =
            DVector::from_iterator(z.len(), z.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        self.chol.l_dirty().solve_lower_triangular_mut(&mut r);
        r
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let w = self.whitened(z);
        self.log_norm - 0.5 * w.norm_squared()
    }

    /// Returns `(log N(z), ∇_z log N(z))`.
    pub fn log_density_and_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let d = DVector::from_iterator(z.len(), z.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        let prec_d = self.chol.solve(&d);
        let quad = d.dot(&prec_d);
        (
            self.log_norm - 0.5 * quad,
            prec_d.iter().map(|v| -v).collect(),
        )
    }
}

pub fn log_density(z: &[f64], params: &GaussianParams) -> Result<f64> {
    if z.len() != params.dim() {
        return Err(EmflowError::Shape(format!(
            "point has length {}, Gaussian has dimension {}",
            z.len(),
            params.dim()
        )));
    }
    Ok(params.factor()?.log_density(z))
}

/// Distribution of the missing block given the observed block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub missing_idx: Vec<usize>,
}

/// Precomputed regression of the missing block on the observed block for one
/// missingness pattern.
#[derive(Debug, Clone)]
pub struct ConditionalPlan {
    pub missing_idx: Vec<usize>,
    pub observed_idx: Vec<usize>,
    /// Σ_mo Σ_oo⁻¹, shape |m|×|o|.
    pub gain: DMatrix<f64>,
    /// Σ_mm − Σ_mo Σ_oo⁻¹ Σ_om.
    pub cond_cov: DMatrix<f64>,
    /// Cholesky of Σ_oo and its log-determinant (None when nothing is observed).
    observed_chol: Option<(Cholesky<f64, Dyn>, f64)>,
}

impl ConditionalPlan {
    pub fn new(params: &GaussianParams, missing: &[bool]) -> Result<Self> {
        let p = params.dim();
        if missing.len() != p {
            return Err(EmflowError::Shape(format!(
                "mask row has length {}, Gaussian has dimension {p}",
                missing.len()
            )));
        }
        let missing_idx: Vec<usize> = (0..p).filter(|&j| missing[j]).collect();
        let observed_idx: Vec<usize> = (0..p).filter(|&j| !missing[j]).collect();
        let (m, o) = (missing_idx.len(), observed_idx.len());
        let cov = &params.cov;
        let sub = |rows: &[usize], cols: &[usize]| {
            DMatrix::from_fn(rows.len(), cols.len(), |a, b| cov[(rows[a], cols[b])])
        };
        if o == 0 {
            return Ok(Self {
                missing_idx,
                observed_idx,
                gain: DMatrix::zeros(m, 0),
                cond_cov: cov.clone(),
                observed_chol: None,
            });
        }
        let (chol, _) = cholesky_jittered(&sub(&observed_idx, &observed_idx))?;
        let logdet = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let (gain, cond_cov) = if m == 0 {
            (DMatrix::zeros(0, o), DMatrix::zeros(0, 0))
        } else {
            let s_om = sub(&observed_idx, &missing_idx);
            let gain = chol.solve(&s_om).transpose();
            let mut cond_cov = sub(&missing_idx, &missing_idx) - &gain * &s_om;
            symmetrize(&mut cond_cov);
            (gain, cond_cov)
        };
        Ok(Self {
            missing_idx,
            observed_idx,
            gain,
            cond_cov,
            observed_chol: Some((chol, logdet)),
        })
    }

    fn observed_residual(&self, z: &[f64], mean: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.observed_idx.len(),
            self.observed_idx.iter().map(|&j| z[j] - mean[j]),
        )
    }

    pub fn conditional_mean(&self, z: &[f64], mean: &DVector<f64>) -> DVector<f64> {
        let base = DVector::from_iterator(
            self.missing_idx.len(),
            self.missing_idx.iter().map(|&j| mean[j]),
        );
        if self.observed_idx.is_empty() || self.missing_idx.is_empty() {
            return base;
        }
        base + &self.gain * self.observed_residual(z, mean)
    }

    /// Writes the conditional mean into the missing coordinates of `z`.
    pub fn impute_in_place(&self, z: &mut [f64], mean: &DVector<f64>) {
        if self.missing_idx.is_empty() {
            return;
        }
        let cm = self.conditional_mean(z, mean);
        for (k, &j) in self.missing_idx.iter().enumerate() {
            z[j] = cm[k];
        }
    }

    /// log N(z_o; μ_o, Σ_oo); zero when nothing is observed.
    pub fn observed_log_density(&self, z: &[f64], mean: &DVector<f64>) -> f64 {
        match &self.observed_chol {
            None => 0.0,
            Some((chol, logdet)) => {
                let mut r = self.observed_residual(z, mean);
                chol.l_dirty().solve_lower_triangular_mut(&mut r);
                -0.5 * (self.observed_idx.len() as f64 * LN_2PI + logdet + r.norm_squared())
            }
        }
    }
}

/// Conditional of the complement of `observed_idx` given `z_o = observed_vals`.
pub fn conditional(
    params: &GaussianParams,
    observed_idx: &[usize],
    observed_vals: &[f64],
) -> Result<ConditionalGaussian> {
    let p = params.dim();
    if observed_idx.is_empty() || observed_idx.len() >= p {
        return Err(EmflowError::InvalidArgument(format!(
            "need 1..{} observed indices, got {}",
            p - 1,
            observed_idx.len()
        )));
    }
    if observed_idx.windows(2).any(|w| w[0] >= w[1]) || observed_idx[observed_idx.len() - 1] >= p {
        return Err(EmflowError::InvalidArgument(
            "observed indices must be strictly increasing and in range".into(),
        ));
    }
    if observed_vals.len() != observed_idx.len() {
        return Err(EmflowError::Shape(
            "observed values do not match indices".into(),
        ));
    }
    let mut missing = vec![true; p];
    let mut z = vec![0.0; p];
    for (&j, &v) in observed_idx.iter().zip(observed_vals) {
        missing[j] = false;
        z[j] = v;
    }
    let plan = ConditionalPlan::new(params, &missing)?;
    Ok(ConditionalGaussian {
        mean: plan.conditional_mean(&z, &params.mean),
        cov: plan.cond_cov,
        missing_idx: plan.missing_idx,
    })
}

/// Replaces missing coordinates by their conditional mean; an all-missing row
/// becomes μ.
pub fn impute_row(z: &[f64], missing: &[bool], params: &GaussianParams) -> Result<Vec<f64>> {
    if z.len() != params.dim() {
        return Err(EmflowError::Shape(
            "row length does not match Gaussian".into(),
        ));
    }
    let plan = ConditionalPlan::new(params, missing)?;
    let mut out = z.to_vec();
    plan.impute_in_place(&mut out, &params.mean);
    Ok(out)
}

/// Scatters the conditional covariance into a p×p zero matrix.
pub fn padded_conditional_cov(cond: &ConditionalGaussian, p: usize) -> DMatrix<f64> {
    scatter(&cond.cov, &cond.missing_idx, p)
}

fn scatter(block: &DMatrix<f64>, idx: &[usize], p: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(p, p);
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            out[(i, j)] = block[(a, b)];
        }
    }
    out
}

/// Conditional plans for every distinct mask pattern of a batch.
pub struct PatternPlans {
    plans: Vec<ConditionalPlan>,
    /// Pattern id for each row.
    row_pattern: Vec<usize>,
}

impl PatternPlans {
    pub fn new(params: &GaussianParams, masks: &[bool], p: usize) -> Result<Self> {
        let mut ids: HashMap<&[bool], usize> = HashMap::new();
        let mut plans = Vec::new();
        let mut row_pattern = Vec::with_capacity(masks.len() / p.max(1));
        for row in masks.chunks_exact(p) {
            let id = match ids.get(row) {
                Some(&id) => id,
                None => {
                    plans.push(ConditionalPlan::new(params, row)?);
                    ids.insert(row, plans.len() - 1);
                    plans.len() - 1
                }
            };
            row_pattern.push(id);
        }
        Ok(Self { plans, row_pattern })
    }

    pub fn plan_for_row(&self, i: usize) -> &ConditionalPlan {
        &self.plans[self.row_pattern[i]]
    }
}

fn check_batch(z: &[f64], masks: &[bool], p: usize, params: &GaussianParams) -> Result<usize> {
    if params.dim() != p || z.len() != masks.len() || p == 0 || !z.len().is_multiple_of(p) {
        return Err(EmflowError::Shape(format!(
            "batch of {} values / {} mask bits does not fit dimension {p} (Gaussian {})",
            z.len(),
            masks.len(),
            params.dim()
        )));
    }
    let b = z.len() / p;
    if b == 0 {
        return Err(EmflowError::InvalidArgument("empty batch".into()));
    }
    Ok(b)
}

/// Conditional-mean imputation of every row of a flat row-major batch.
pub fn impute_batch(
    z: &[f64],
    masks: &[bool],
    p: usize,
    params: &GaussianParams,
    exec: Execution,
) -> Result<Vec<f64>> {
    let b = check_batch(z, masks, p, params)?;
    let plans = PatternPlans::new(params, masks, p)?;
    let rows = exec.map_chunks(b, |range| {
        let mut out = z[range.start * p..range.end * p].to_vec();
        for (k, i) in range.enumerate() {
            plans
                .plan_for_row(i)
                .impute_in_place(&mut out[k * p..(k + 1) * p], &params.mean);
        }
        out
    });
    Ok(rows.concat())
}

/// Result of an E-step over a batch.
#[derive(Debug, Clone)]
pub struct EStep {
    /// Rows with missing coordinates replaced by conditional means.
    pub imputed: Vec<f64>,
    /// Average over rows of the padded conditional covariances.
    pub cond_cov_mean: DMatrix<f64>,
}

/// Conditional-mean imputation of a batch plus its averaged padded
/// conditional covariance.
pub fn e_step(
    z: &[f64],
    masks: &[bool],
    p: usize,
    params: &GaussianParams,
    exec: Execution,
) -> Result<EStep> {
    let b = check_batch(z, masks, p, params)?;
    let plans = PatternPlans::new(params, masks, p)?;
    let imputed: Vec<f64> = exec
        .map_chunks(b, |range| {
            let mut out = z[range.start * p..range.end * p].to_vec();
            for (k, i) in range.enumerate() {
                plans
                    .plan_for_row(i)
                    .impute_in_place(&mut out[k * p..(k + 1) * p], &params.mean);
            }
            out
        })
        .concat();
    let mut counts = vec![0usize; plans.plans.len()];
    for &id in &plans.row_pattern {
        counts[id] += 1;
    }
    let mut cond_cov_mean = DMatrix::zeros(p, p);
    for (plan, &count) in plans.plans.iter().zip(&counts) {
        if plan.missing_idx.is_empty() {
            continue;
        }
        let w = count as f64 / b as f64;
        for (a, &i) in plan.missing_idx.iter().enumerate() {
            for (c, &j) in plan.missing_idx.iter().enumerate() {
                cond_cov_mean[(i, j)] += w * plan.cond_cov[(a, c)];
            }
        }
    }
    Ok(EStep {
        imputed,
        cond_cov_mean,
    })
}

/// One EM maximization over a batch: imputes rows under `params`, then
/// returns the mean of the imputed rows, the 1/B covariance plus the averaged
/// padded conditional covariances, and the imputed rows.
pub fn batch_em_estimates(
    z: &[f64],
    masks: &[bool],
    p: usize,
    params: &GaussianParams,
    exec: Execution,
) -> Result<(DVector<f64>, DMatrix<f64>, Vec<f64>)> {
    let e = e_step(z, masks, p, params, exec)?;
    let (mean, mut cov) = sample_moments(&e.imputed, p, exec);
    cov += &e.cond_cov_mean;
    symmetrize(&mut cov);
    Ok((mean, cov, e.imputed))
}

/// Sample mean and biased (1/B) covariance of a flat row-major batch.
pub fn sample_moments(rows: &[f64], p: usize, exec: Execution) -> (DVector<f64>, DMatrix<f64>) {
    let b = rows.len() / p;
    let sums = exec.map_chunks(b, |range| {
        let mut s = vec![0.0; p];
        for i in range {
            for (acc, v) in s.iter_mut().zip(&rows[i * p..(i + 1) * p]) {
                *acc += v;
            }
        }
        s
    });
    let mut mean = DVector::zeros(p);
    for s in sums {
        for j in 0..p {
            mean[j] += s[j];
        }
    }
    mean /= b as f64;
    let partial = exec.map_chunks(b, |range| {
        let mut acc = vec![0.0; p * p];
        let mut d = vec![0.0; p];
        for i in range {
            for j in 0..p {
                d[j] = rows[i * p + j] - mean[j];
            }
            for r in 0..p {
                for c in r..p {
                    acc[r * p + c] += d[r] * d[c];
                }
            }
        }
        acc
    });
    let mut cov = DMatrix::zeros(p, p);
    for acc in partial {
        for r in 0..p {
            for c in r..p {
                cov[(r, c)] += acc[r * p + c];
            }
        }
    }
    for r in 0..p {
        for c in r..p {
            let v = cov[(r, c)] / b as f64;
            cov[(r, c)] = v;
            cov[(c, r)] = v;
        }
    }
    (mean, cov)
}

/// Observed-data log-likelihood Σᵢ log N(zᵢ_o; μ_o, Σ_oo).
pub fn observed_log_likelihood(
    z: &[f64],
    masks: &[bool],
    p: usize,
    params: &GaussianParams,
    exec: Execution,
) -> Result<f64> {
    let b = check_batch(z, masks, p, params)?;
    let plans = PatternPlans::new(params, masks, p)?;
    Ok(exec
        .map_chunks(b, |range| {
            range
                .map(|i| {
                    plans
                        .plan_for_row(i)
                        .observed_log_density(&z[i * p..(i + 1) * p], &params.mean)
                })
                .sum::<f64>()
        })
        .into_iter()
        .sum())
}
