//! Missing-entry RMSE and the k-fold benchmark harness.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline_em::{
    batch_em_fit, batch_em_impute, default_init, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::data::{column_statistic, fill_constant, fit_scaler, DataMatrix, MaskMatrix};
use crate::engine::{run_with_holdout, Holdout, TrainConfig};
use crate::error::{EmflowError, Result};
use crate::exec::Execution;
use crate::masking::{simulate, Mechanism};
use crate::online_em::BetaSchedule;

/// Root mean squared error over the cells marked missing.
pub fn rmse_missing(imputed: &DataMatrix, truth: &DataMatrix, mask: &MaskMatrix) -> Result<f64> {
    if imputed.n() != truth.n()
        || imputed.p() != truth.p()
        || mask.n() != truth.n()
        || mask.p() != truth.p()
    {
        return Err(EmflowError::Shape(format!(
            "imputed {}x{}, truth {}x{}, mask {}x{}",
            imputed.n(),
            imputed.p(),
            truth.n(),
            truth.p(),
            mask.n(),
            mask.p()
        )));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for ((a, b), &m) in imputed
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .zip(mask.as_slice())
    {
        if m {
            sum += (a - b) * (a - b);
            count += 1;
        }
    }
    if count == 0 {
        return Err(EmflowError::InvalidArgument(
            "RMSE needs at least one missing cell".into(),
        ));
    }
    Ok((sum / count as f64).sqrt())
}

/// Fold index of every row: a seeded permutation dealt round-robin, so fold
/// sizes differ by at most one.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || k > n {
        return Err(EmflowError::InvalidArgument(format!(
            "need 2 <= k <= n, got k={k}, n={n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &row) in perm.iter().enumerate() {
        folds[row] = pos % k;
    }
    Ok(folds)
}

/// Default training config for a benchmark under `mechanism`: covariance
/// inflation is scheduled under MAR only, where the naive initial imputation
/// distorts the observed marginals more.
pub fn protocol_config(mechanism: Mechanism) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.em.beta_schedule = match mechanism {
        Mechanism::Mar => BetaSchedule::tabular(),
        Mechanism::Mcar { .. } => BetaSchedule::none(),
    };
    cfg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Emflow,
    BaselineEm,
    Mean,
    Median,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Emflow,
        Method::BaselineEm,
        Method::Mean,
        Method::Median,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Emflow => "emflow",
            Method::BaselineEm => "baseline-em",
            Method::Mean => "mean",
            Method::Median => "median",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub folds: usize,
    pub seed: u64,
    pub mechanism: Mechanism,
    pub methods: Vec<Method>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            mechanism: Mechanism::Mcar { rate: 0.2 },
            methods: Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub test_missing_cells: usize,
    /// Test RMSE per method, in the order of the configured methods.
    pub rmse: Vec<(Method, f64)>,
    /// Per-iteration test RMSE of the flow model, when it was run.
    pub emflow_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean: f64,
    /// Sample standard deviation across folds.
    pub sd: f64,
    pub per_fold: Vec<f64>,
}

impl MethodSummary {
    pub fn formatted(&self) -> String {
        format!("{:.4}±{:.4}", self.mean, self.sd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub benchmark: BenchmarkConfig,
    pub train: TrainConfig,
    pub n: usize,
    pub p: usize,
    pub missing_fraction: f64,
    pub summary: Vec<MethodSummary>,
    pub folds: Vec<FoldResult>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Zeroes missing cells so nothing downstream can read the withheld truth.
fn hide_missing(truth: &DataMatrix, mask: &MaskMatrix) -> Result<DataMatrix> {
    let values = truth
        .as_slice()
        .iter()
        .zip(mask.as_slice())
        .map(|(&v, &m)| if m { 0.0 } else { v })
        .collect();
    DataMatrix::new(truth.n(), truth.p(), values)
}

fn run_fold(
    data: &DataMatrix,
    mask: &MaskMatrix,
    folds: &[usize],
    fold: usize,
    bench: &BenchmarkConfig,
    train_cfg: &TrainConfig,
    exec: Execution,
) -> Result<FoldResult> {
    let test_idx: Vec<usize> = (0..data.n()).filter(|&i| folds[i] == fold).collect();
    let train_idx: Vec<usize> = (0..data.n()).filter(|&i| folds[i] != fold).collect();
    let train_mask = mask.select_rows(&train_idx);
    let test_mask = mask.select_rows(&test_idx);
    let train_raw = data.select_rows(&train_idx)?;
    let test_raw = data.select_rows(&test_idx)?;

    let scaler = fit_scaler(&train_raw, &train_mask)?;
    let train_truth = scaler.apply(&train_raw)?;
    let test_truth = scaler.apply(&test_raw)?;
    let train_in = hide_missing(&train_truth, &train_mask)?;
    let test_in = hide_missing(&test_truth, &test_mask)?;

    let mut rmse = Vec::new();
    let mut emflow_trace = Vec::new();
    for &method in &bench.methods {
        let imputed = match method {
            Method::Emflow => {
                let holdout = Holdout {
                    data: &test_in,
                    mask: &test_mask,
                    truth: Some(&test_truth),
                };
                let (run, test_imputed) = run_with_holdout(
                    &train_in,
                    &train_mask,
                    train_cfg,
                    Some(&train_truth),
                    holdout,
                    exec,
                )?;
                emflow_trace = run.trace.iter().filter_map(|r| r.test_rmse).collect();
                test_imputed.into_values()
            }
            Method::BaselineEm => {
                let init = default_init(&train_in, &train_mask)?;
                let fit = batch_em_fit(
                    &train_in,
                    &train_mask,
                    init,
                    DEFAULT_MAX_ITER,
                    DEFAULT_TOL,
                    exec,
                )?;
                batch_em_impute(&test_in, &test_mask, &fit.params, exec)?.into_values()
            }
            Method::Mean | Method::Median => {
                let stat = column_statistic(&train_in, &train_mask, method == Method::Median)?;
                fill_constant(&test_in, &test_mask, &stat)?.into_values()
            }
        };
        rmse.push((method, rmse_missing(&imputed, &test_truth, &test_mask)?));
    }
    Ok(FoldResult {
        fold,
        n_train: train_idx.len(),
        n_test: test_idx.len(),
        test_missing_cells: test_mask.missing_count(),
        rmse,
        emflow_trace,
    })
}

/// k-fold cross-validated imputation benchmark on complete `data`.
///
/// The mask is simulated once on the full (globally min-max scaled) data
/// with per-row random streams. Every fold then scales with statistics of
/// its train rows' observed cells, trains on those rows and re-imputes the
/// held-out rows.
pub fn kfold_benchmark(
    data: &DataMatrix,
    bench: &BenchmarkConfig,
    train_cfg: &TrainConfig,
    exec: Execution,
) -> Result<BenchmarkReport> {
    if bench.methods.is_empty() {
        return Err(EmflowError::InvalidArgument(
            "no methods to benchmark".into(),
        ));
    }
    train_cfg.validate()?;
    let folds = fold_assignment(data.n(), bench.folds, bench.seed)?;
    // MAR probabilities are defined on [0, 1]-scaled features.
    let unit = fit_scaler(data, &MaskMatrix::observed(data.n(), data.p()))?.apply(data)?;
    let mask = simulate(&unit, bench.mechanism, bench.seed)?;
    // Folds run side by side when allowed; each fold is then sequential.
    let inner = if exec.is_parallel() {
        Execution::Sequential
    } else {
        exec
    };
    let results = exec
        .map(bench.folds, |fold| {
            run_fold(data, &mask, &folds, fold, bench, train_cfg, inner)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let summary = bench
        .methods
        .iter()
        .enumerate()
        .map(|(m, &method)| {
            let per_fold: Vec<f64> = results.iter().map(|f| f.rmse[m].1).collect();
            let (mean, sd) = mean_sd(&per_fold);
            MethodSummary {
                method,
                mean,
                sd,
                per_fold,
            }
        })
        .collect();
    Ok(BenchmarkReport {
        benchmark: bench.clone(),
        train: train_cfg.clone(),
        n: data.n(),
        p: data.p(),
        missing_fraction: mask.missing_fraction(),
        summary,
        folds: results,
    })
}

impl BenchmarkReport {
    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    /// Aligned text table, one row per method.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .summary
            .iter()
            .map(|s| s.method.name().len())
            .max()
            .unwrap_or(6)
            .max(6);
        let _ = writeln!(
            out,
            "{}-fold RMSE, n={}, p={}, missing fraction {:.4}",
            self.benchmark.folds, self.n, self.p, self.missing_fraction
        );
        let _ = writeln!(out, "{:<width$}  {:>15}", "method", "rmse (mean±sd)");
        for s in &self.summary {
            let _ = writeln!(out, "{:<width$}  {:>15}", s.method.name(), s.formatted());
        }
        out
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    /// Long-format CSV: fold,method,rmse.
    pub fn write_fold_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["fold", "method", "rmse"])?;
        for f in &self.folds {
            for (m, r) in &f.rmse {
                w.write_record([f.fold.to_string(), m.name().to_string(), r.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
