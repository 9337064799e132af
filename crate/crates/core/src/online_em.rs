//! Online EM for a full-covariance Gaussian over a stream of mini-batches.
//!
//! The state keeps a moving average of batch-level EM estimates. The
//! parameters handed out for imputation are that average with its diagonal
//! inflated by the current β and jittered to positive definite.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EmflowError, Result};
use crate::exec::Execution;
use crate::gaussian::{e_step, make_pd, sample_moments, symmetrize, GaussianParams};

/// Piecewise-constant β keyed by outer iteration (1-based): each entry
/// `(k, β)` applies from iteration `k` until the next entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule(pub Vec<(usize, f64)>);

impl BetaSchedule {
    pub fn none() -> Self {
        Self(Vec::new())
    }

    /// 1e-2 for iterations 1–2, 1e-3 for 3–4, 0 afterwards.
    pub fn tabular() -> Self {
        Self(vec![(1, 1e-2), (3, 1e-3), (5, 0.0)])
    }

    pub fn beta_at(&self, iteration: usize) -> f64 {
        self.0
            .iter()
            .filter(|(k, _)| *k <= iteration)
            .max_by_key(|(k, _)| *k)
            .map_or(0.0, |(_, b)| *b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Step-size scale C in ρ_t = C·t^(−γ).
    pub c: f64,
    pub gamma: f64,
    pub beta_schedule: BetaSchedule,
    /// Maximum super-batch size; 0 disables the buffer.
    pub superbatch_max: usize,
    /// Reinitialize the Gaussian (and reset t) with the flow every outer iteration.
    pub reinit_each_iteration: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            c: 0.99,
            gamma: 0.8,
            beta_schedule: BetaSchedule::tabular(),
            superbatch_max: 0,
            reinit_each_iteration: true,
        }
    }
}

impl EmConfig {
    /// Lists every violated constraint.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.c > 0.0 && self.c <= 1.0) {
            out.push(format!("em.c must lie in (0, 1], got {}", self.c));
        }
        if !(self.gamma > 0.5 && self.gamma <= 1.0) {
            out.push(format!("em.gamma must lie in (0.5, 1], got {}", self.gamma));
        }
        for (k, b) in &self.beta_schedule.0 {
            if *k == 0 {
                out.push("em.beta_schedule iterations are 1-based".into());
            }
            if !(b.is_finite() && *b >= 0.0) {
                out.push(format!(
                    "em.beta_schedule entry for iteration {k} must be >= 0, got {b}"
                ));
            }
        }
        out
    }
}

/// ρ_t = C·t^(−γ), for t ≥ 1.
pub fn step_size(t: u64, config: &EmConfig) -> f64 {
    debug_assert!(t >= 1);
    config.c * (t as f64).powf(-config.gamma)
}

/// Σ + β·Diag(Σ).
pub fn robustify(cov: &DMatrix<f64>, beta: f64) -> DMatrix<f64> {
    let mut out = cov.clone();
    for i in 0..out.nrows() {
        out[(i, i)] += beta * cov[(i, i)];
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BufferedRow {
    values: Vec<f64>,
    batch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineEmState {
    t: u64,
    p: usize,
    beta: f64,
    config: EmConfig,
    /// Moving-average estimates before inflation.
    running_mean: DVector<f64>,
    running_cov: DMatrix<f64>,
    /// Inflated, PD parameters used for imputation.
    params: GaussianParams,
    /// Most recent rows first.
    buffer: VecDeque<BufferedRow>,
    /// Average padded conditional covariance of each buffered batch.
    batch_cond_cov: BTreeMap<u64, DMatrix<f64>>,
    next_batch: u64,
}

impl OnlineEmState {
    /// Starts from the sample mean and 1/|B| covariance of a complete batch.
    pub fn init_from_batch(
        z: &[f64],
        p: usize,
        config: EmConfig,
        beta: f64,
        exec: Execution,
    ) -> Result<Self> {
        if p == 0 || !z.len().is_multiple_of(p) || z.len() / p < 2 {
            return Err(EmflowError::InvalidArgument(format!(
                "online EM initialization needs at least 2 rows of length {p}"
            )));
        }
        let (running_mean, running_cov) = sample_moments(z, p, exec);
        let params = Self::inflate(&running_mean, &running_cov, beta)?;
        Ok(Self {
            t: 0,
            p,
            beta,
            config,
            running_mean,
            running_cov,
            params,
            buffer: VecDeque::new(),
            batch_cond_cov: BTreeMap::new(),
            next_batch: 0,
        })
    }

    fn inflate(mean: &DVector<f64>, cov: &DMatrix<f64>, beta: f64) -> Result<GaussianParams> {
        GaussianParams::new(mean.clone(), make_pd(robustify(cov, beta))?)
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn config(&self) -> &EmConfig {
        &self.config
    }

    pub fn params(&self) -> &GaussianParams {
        &self.params
    }

    pub fn running_mean(&self) -> &DVector<f64> {
        &self.running_mean
    }

    pub fn running_cov(&self) -> &DMatrix<f64> {
        &self.running_cov
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn set_beta(&mut self, beta: f64) -> Result<()> {
        self.beta = beta;
        self.params = Self::inflate(&self.running_mean, &self.running_cov, beta)?;
        Ok(())
    }

    /// One online EM step on a latent batch. Returns the batch with missing
    /// coordinates replaced by conditional means under the pre-update params.
    pub fn em_update(&mut self, z: &[f64], masks: &[bool], exec: Execution) -> Result<Vec<f64>> {
        let p = self.p;
        let estep = e_step(z, masks, p, &self.params, exec)?;
        let b = estep.imputed.len() / p;

        let room = self.config.superbatch_max.saturating_sub(b);
        let take = room.min(self.buffer.len());
        let (batch_mean, mut batch_cov) = if take == 0 {
            let (m, mut c) = sample_moments(&estep.imputed, p, exec);
            c += &estep.cond_cov_mean;
            (m, c)
        } else {
            let mut rows = estep.imputed.clone();
            let mut cond = &estep.cond_cov_mean * b as f64;
            for r in self.buffer.iter().take(take) {
                rows.extend_from_slice(&r.values);
                cond += &self.batch_cond_cov[&r.batch];
            }
            let (m, mut c) = sample_moments(&rows, p, exec);
            c += cond / (b + take) as f64;
            (m, c)
        };
        symmetrize(&mut batch_cov);

        self.t += 1;
        let rho = step_size(self.t, &self.config);
        self.running_mean = &batch_mean * rho + &self.running_mean * (1.0 - rho);
        self.running_cov = &batch_cov * rho + &self.running_cov * (1.0 - rho);
        symmetrize(&mut self.running_cov);
        self.params = Self::inflate(&self.running_mean, &self.running_cov, self.beta)?;

        if self.config.superbatch_max > 0 {
            let id = self.next_batch;
            self.next_batch += 1;
            self.batch_cond_cov.insert(id, estep.cond_cov_mean.clone());
            for row in estep.imputed.chunks_exact(p).rev() {
                self.buffer.push_front(BufferedRow {
                    values: row.to_vec(),
                    batch: id,
                });
            }
            self.buffer.truncate(self.config.superbatch_max);
            let oldest = self.buffer.back().map_or(id, |r| r.batch);
            self.batch_cond_cov.retain(|&k, _| k >= oldest);
        }
        Ok(estep.imputed)
    }
}
