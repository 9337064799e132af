//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so every line is printed even
//! when a criterion fails; the process exits non-zero on any FAIL.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use emflow::baseline_em::{
    batch_em_fit, batch_em_impute, default_init, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use emflow::data::{
    column_statistic, fill_constant, fit_scaler, initial_impute, DataMatrix, InitStrategy,
    MaskMatrix,
};
use emflow::engine::{run, run_with_holdout, Holdout, IterationRecord, TrainConfig};
use emflow::eval::{kfold_benchmark, protocol_config, rmse_missing, BenchmarkConfig, Method};
use emflow::flow::{loss_and_grad, loss_l1, loss_l2, CompositeGradient, FlowModel, LossBatch};
use emflow::gaussian::{conditional, GaussianParams};
use emflow::io::{read_data_csv, CsvOptions};
use emflow::masking::{mar_mask, mar_retained, maskable_missing_fraction, mcar_mask, Mechanism};
use emflow::online_em::{BetaSchedule, EmConfig, OnlineEmState};
use emflow::Execution;
use nalgebra::{DMatrix, DVector};
use num::{BigInt, BigRational, ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Flow with every weight drawn from N(0, scale²), so no layer is the identity.
fn random_flow(p: usize, depth: usize, hidden: usize, seed: u64, scale: f64) -> FlowModel {
    let mut flow = FlowModel::new(p, depth, hidden, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let params: Vec<f64> = (0..flow.num_params())
        .map(|_| normal(&mut rng) * scale)
        .collect();
    flow.set_params(&params).unwrap();
    flow
}

fn within_time(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

// ---------------------------------------------------------------- criterion 1

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut worst_roundtrip: f64 = 0.0;
    let mut worst_logdet_pair: f64 = 0.0;
    for &p in &[2usize, 8, 32] {
        let flow = random_flow(p, 6, 32, p as u64, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + p as u64);
        for _ in 0..1000 {
            let z: Vec<f64> = (0..p).map(|_| normal(&mut rng)).collect();
            let (x, ld_f) = flow.forward(&z).unwrap();
            let (z2, ld_i) = flow.inverse(&x).unwrap();
            let (x2, _) = flow.forward(&z2).unwrap();
            for j in 0..p {
                worst_roundtrip = worst_roundtrip
                    .max((z[j] - z2[j]).abs())
                    .max((x[j] - x2[j]).abs());
            }
            worst_logdet_pair = worst_logdet_pair.max((ld_f + ld_i).abs());
        }
    }

    // Central-difference Jacobian of the forward map for small p.
    let h = 1e-6;
    let mut worst_fd: f64 = 0.0;
    for &p in &[2usize, 4, 6] {
        let flow = random_flow(p, 6, 32, 10 + p as u64, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + p as u64);
        for _ in 0..50 {
            let z: Vec<f64> = (0..p).map(|_| normal(&mut rng)).collect();
            let (_, ld) = flow.forward(&z).unwrap();
            let mut jac = DMatrix::zeros(p, p);
            for k in 0..p {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[k] += h;
                zm[k] -= h;
                let xp = flow.forward(&zp).unwrap().0;
                let xm = flow.forward(&zm).unwrap().0;
                for j in 0..p {
                    jac[(j, k)] = (xp[j] - xm[j]) / (2.0 * h);
                }
            }
            let numeric = jac.determinant().abs().ln();
            worst_fd = worst_fd.max((numeric - ld).abs());
        }
    }
    let elapsed = start.elapsed();
    check(
        worst_roundtrip < 1e-5 && worst_fd < 1e-4 && worst_logdet_pair < 1e-8 && within_time(elapsed, 60),
        format!(
            "max round-trip err {worst_roundtrip:.2e} (<1e-5), max |logdet - FD| {worst_fd:.2e} (<1e-4), \
             max |ld_f + ld_inv| {worst_logdet_pair:.2e}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

/// Max over parameters of |g − fd| / max(|g|, |fd|, 1e-5).
fn fd_relative_error(flow: &FlowModel, analytic: &[f64], loss: &dyn Fn(&FlowModel) -> f64) -> f64 {
    let h = 1e-5;
    let base = flow.params();
    let mut probe = flow.clone();
    let mut worst: f64 = 0.0;
    for k in 0..base.len() {
        let mut plus = base.clone();
        plus[k] += h;
        probe.set_params(&plus).unwrap();
        let lp = loss(&probe);
        let mut minus = base.clone();
        minus[k] -= h;
        probe.set_params(&minus).unwrap();
        let lm = loss(&probe);
        let fd = (lp - lm) / (2.0 * h);
        let denom = analytic[k].abs().max(fd.abs()).max(1e-5);
        worst = worst.max((analytic[k] - fd).abs() / denom);
    }
    worst
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let (p, b) = (4, 12);
    let flow = random_flow(p, 2, 8, 5, 0.3);
    let base = GaussianParams::new(
        DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0]),
        DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.3, 0.1, 0.0, 0.3, 0.9, 0.2, 0.1, 0.1, 0.2, 1.2, 0.4, 0.0, 0.1, 0.4, 0.8,
            ],
        ),
    )
    .unwrap();
    let fg = base.factor().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let data: Vec<f64> = (0..b * p).map(|_| normal(&mut rng)).collect();
    let latent: Vec<f64> = (0..b * p).map(|_| normal(&mut rng)).collect();
    let masks: Vec<bool> = (0..b * p).map(|_| rng.random::<f64>() < 0.3).collect();
    let current: Vec<f64> = latent.iter().map(|z| z + 0.2 * normal(&mut rng)).collect();
    let alpha = 10.0;
    let exec = Execution::Sequential;

    let (_, g1) = loss_and_grad(&flow, &fg, LossBatch::Likelihood { data: &data }, exec).unwrap();
    let e1 = fd_relative_error(&flow, &g1, &|f| loss_l1(&data, f, &base, exec).unwrap());

    let forward_all = |f: &FlowModel| -> Vec<f64> {
        latent
            .chunks(p)
            .flat_map(|r| f.forward(r).unwrap().0)
            .collect()
    };
    let composite = |gradient| LossBatch::Composite {
        latent: &latent,
        current: &current,
        masks: &masks,
        alpha,
        gradient,
    };
    // Total derivative: the literal composite loss with x̃ = f(ẑ) recomputed.
    let (_, g_total) =
        loss_and_grad(&flow, &fg, composite(CompositeGradient::Total), exec).unwrap();
    let e_total = fd_relative_error(&flow, &g_total, &|f| {
        loss_l2(&forward_all(f), &current, &masks, f, &base, alpha, exec).unwrap()
    });
    // Detached likelihood: x̃ frozen at the current parameters inside log p_X.
    let frozen = forward_all(&flow);
    let (_, g_det) =
        loss_and_grad(&flow, &fg, composite(CompositeGradient::Detached), exec).unwrap();
    let e_det = fd_relative_error(&flow, &g_det, &|f| {
        let rec = forward_all(f);
        let penalty: f64 = rec
            .iter()
            .zip(&current)
            .zip(&masks)
            .filter(|(_, &m)| !m)
            .map(|((a, c), _)| (a - c) * (a - c))
            .sum::<f64>()
            / b as f64;
        loss_l1(&frozen, f, &base, exec).unwrap() + alpha * penalty
    });
    let elapsed = start.elapsed();
    check(
        e1 < 1e-3 && e_total < 1e-3 && e_det < 1e-3 && within_time(elapsed, 60),
        format!(
            "{} params; max rel err L1 {e1:.2e}, L2(total) {e_total:.2e}, L2(detached) {e_det:.2e} (<1e-3), {:.1}s",
            flow.num_params(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn rational(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

/// Exact inverse by Gauss-Jordan elimination over the rationals.
fn exact_inverse(m: &[Vec<BigRational>]) -> Vec<Vec<BigRational>> {
    let n = m.len();
    let one = BigRational::from_integer(BigInt::from(1));
    let mut a: Vec<Vec<BigRational>> = m
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| {
                if i == j {
                    one.clone()
                } else {
                    BigRational::zero()
                }
            }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).find(|&r| !a[r][col].is_zero()).expect("singular");
        a.swap(col, pivot);
        let inv = one.clone() / a[col][col].clone();
        for v in a[col].iter_mut() {
            *v = v.clone() * inv.clone();
        }
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let f = a[r][col].clone();
                for c in 0..2 * n {
                    let sub = f.clone() * a[col][c].clone();
                    a[r][c] = a[r][c].clone() - sub;
                }
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (mut worst_mean, mut worst_cov): (f64, f64) = (0.0, 0.0);
    let mut min_eig = f64::INFINITY;
    for _ in 0..200 {
        let p = rng.random_range(2..=8);
        let a = DMatrix::from_fn(p, p, |_, _| normal(&mut rng));
        let cov = &a * a.transpose() / p as f64 + DMatrix::identity(p, p) * 0.1;
        let cov = (&cov + cov.transpose()) * 0.5;
        let mean = DVector::from_fn(p, |_, _| normal(&mut rng));
        let params = GaussianParams::new(mean.clone(), cov.clone()).unwrap();

        let mut idx: Vec<usize> = (0..p).collect();
        idx.shuffle(&mut rng);
        let n_obs = rng.random_range(1..p);
        let mut obs = idx[..n_obs].to_vec();
        obs.sort_unstable();
        let miss: Vec<usize> = (0..p).filter(|j| !obs.contains(j)).collect();
        let vals: Vec<f64> = obs.iter().map(|_| normal(&mut rng)).collect();
        let cond = conditional(&params, &obs, &vals).unwrap();
        // `GaussianParams::new` symmetrizes; the oracle works from the stored matrix.
        let stored = params.cov();

        let s_oo: Vec<Vec<BigRational>> = obs
            .iter()
            .map(|&i| obs.iter().map(|&j| rational(stored[(i, j)])).collect())
            .collect();
        let inv = exact_inverse(&s_oo);
        let resid: Vec<BigRational> = obs
            .iter()
            .zip(&vals)
            .map(|(&j, &v)| rational(v) - rational(mean[j]))
            .collect();
        for (a_i, &m) in miss.iter().enumerate() {
            let gain_row: Vec<BigRational> = (0..obs.len())
                .map(|k| {
                    obs.iter()
                        .enumerate()
                        .fold(BigRational::zero(), |acc, (l, &o)| {
                            acc + rational(stored[(m, o)]) * inv[l][k].clone()
                        })
                })
                .collect();
            let mu = gain_row
                .iter()
                .zip(&resid)
                .fold(rational(mean[m]), |acc, (g, r)| acc + g.clone() * r.clone());
            worst_mean = worst_mean.max((mu.to_f64().unwrap() - cond.mean[a_i]).abs());
            for (b_i, &m2) in miss.iter().enumerate() {
                let c = obs
                    .iter()
                    .enumerate()
                    .fold(rational(stored[(m, m2)]), |acc, (k, &o)| {
                        acc - gain_row[k].clone() * rational(stored[(o, m2)])
                    });
                worst_cov = worst_cov.max((c.to_f64().unwrap() - cond.cov[(a_i, b_i)]).abs());
            }
        }
        min_eig = min_eig.min(cond.cov.clone().symmetric_eigenvalues().min());
    }
    let elapsed = start.elapsed();
    check(
        worst_mean < 1e-9 && worst_cov < 1e-9 && min_eig >= -1e-9,
        format!(
            "200 cases vs exact rational oracle: max mean err {worst_mean:.2e}, max cov err {worst_cov:.2e} (<1e-9), \
             min Schur eigenvalue {min_eig:.3e}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criteria 4-5

/// Scaled MVN sample (n=2000, p=5) with a 20% MCAR mask.
fn mvn_instance() -> (DataMatrix, MaskMatrix) {
    let (n, p) = (2000, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = DMatrix::from_fn(p, p, |_, _| normal(&mut rng));
    let mut values = Vec::with_capacity(n * p);
    for _ in 0..n {
        let e = DVector::from_fn(p, |_, _| normal(&mut rng));
        let x = &a * e;
        values.extend((0..p).map(|j| x[j] + j as f64));
    }
    let data = DataMatrix::new(n, p, values).unwrap();
    let data = fit_scaler(&data, &MaskMatrix::observed(n, p))
        .unwrap()
        .apply(&data)
        .unwrap();
    let mask = mcar_mask(n, p, 0.2, 5).unwrap();
    (data, mask)
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let exec = Execution::Parallel;
    let (data, mask) = mvn_instance();
    let (n, p) = (data.n(), data.p());

    // Complete data: one iteration to the sample mean and 1/n covariance.
    let full = MaskMatrix::observed(n, p);
    let fit = batch_em_fit(
        &data,
        &full,
        default_init(&data, &full).unwrap(),
        DEFAULT_MAX_ITER,
        DEFAULT_TOL,
        exec,
    )
    .unwrap();
    let mut mean = vec![0.0; p];
    for row in data.rows() {
        for j in 0..p {
            mean[j] += row[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut complete_err: f64 = 0.0;
    for i in 0..p {
        complete_err = complete_err.max((fit.params.mean()[i] - mean[i]).abs());
        for j in 0..p {
            let c: f64 = data
                .rows()
                .map(|r| (r[i] - mean[i]) * (r[j] - mean[j]))
                .sum::<f64>()
                / n as f64;
            complete_err = complete_err.max((fit.params.cov()[(i, j)] - c).abs());
        }
    }

    let fit = batch_em_fit(
        &data,
        &mask,
        default_init(&data, &mask).unwrap(),
        DEFAULT_MAX_ITER,
        DEFAULT_TOL,
        exec,
    )
    .unwrap();
    let worst_drop = fit
        .log_likelihood
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(f64::NEG_INFINITY, f64::max);
    let em_imputed = batch_em_impute(&data, &mask, &fit.params, exec).unwrap();
    let rmse_em = rmse_missing(em_imputed.values(), &data, &mask).unwrap();
    let means = column_statistic(&data, &mask, false).unwrap();
    let rmse_mean = rmse_missing(
        fill_constant(&data, &mask, &means).unwrap().values(),
        &data,
        &mask,
    )
    .unwrap();
    let elapsed = start.elapsed();
    check(
        complete_err < 1e-12 && worst_drop <= 1e-8 && rmse_em < rmse_mean && within_time(elapsed, 60),
        format!(
            "complete-data err {complete_err:.1e} (<1e-12); {} iters, largest log-lik drop {worst_drop:.1e} (<=1e-8); \
             RMSE batch EM {rmse_em:.4} < column mean {rmse_mean:.4}; {:.1}s",
            fit.iterations,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let exec = Execution::Parallel;
    let (data, mask) = mvn_instance();
    let (n, p) = (data.n(), data.p());
    let batch = batch_em_fit(
        &data,
        &mask,
        default_init(&data, &mask).unwrap(),
        DEFAULT_MAX_ITER,
        DEFAULT_TOL,
        exec,
    )
    .unwrap();

    let config = EmConfig {
        c: 0.99,
        gamma: 0.8,
        beta_schedule: BetaSchedule::none(),
        superbatch_max: 0,
        reinit_each_iteration: false,
    };
    let imputed = initial_impute(&data, &mask, InitStrategy::RandomObserved, 6).unwrap();
    let values = imputed.values().as_slice();
    let bits = mask.as_slice();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gather = |rows: &[usize]| -> (Vec<f64>, Vec<bool>) {
        let mut z = Vec::new();
        let mut m = Vec::new();
        for &i in rows {
            z.extend_from_slice(&values[i * p..(i + 1) * p]);
            m.extend_from_slice(&bits[i * p..(i + 1) * p]);
        }
        (z, m)
    };
    order.shuffle(&mut rng);
    let (z0, _) = gather(&order[..256]);
    let mut state = OnlineEmState::init_from_batch(&z0, p, config, 0.0, exec).unwrap();
    let epochs = 30;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(256) {
            let (z, m) = gather(rows);
            state.em_update(&z, &m, exec).unwrap();
        }
    }
    let mean_err = (state.running_mean() - batch.params.mean()).amax();
    let cov_err = (state.running_cov() - batch.params.cov()).amax();
    let elapsed = start.elapsed();
    check(
        mean_err < 1e-2 && cov_err < 5e-2 && within_time(elapsed, 120),
        format!(
            "{epochs} epochs, {} online steps: |mu_online - mu_batch|_inf {mean_err:.2e} (<1e-2), \
             |Sigma_online - Sigma_batch|_max {cov_err:.2e} (<5e-2), {:.1}s",
            state.t(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criteria 6-7

/// Samples of a rank-2-plus-noise Gaussian (p = 6) pushed through a fixed
/// random 4-layer coupling map.
fn nonlinear_instance() -> DataMatrix {
    let (n, p, rank) = (2000, 6, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let a: Vec<f64> = (0..p * p).map(|_| normal(&mut rng)).collect();
    let map = {
        let mut flow = FlowModel::new(p, 4, 16, 7).unwrap();
        let params: Vec<f64> = (0..flow.num_params())
            .map(|_| normal(&mut rng) * 0.5)
            .collect();
        flow.set_params(&params).unwrap();
        flow
    };
    let mut values = Vec::with_capacity(n * p);
    for _ in 0..n {
        let e: Vec<f64> = (0..p).map(|_| normal(&mut rng)).collect();
        let z: Vec<f64> = (0..p)
            .map(|i| {
                (0..rank).map(|j| a[i * p + j] * e[j]).sum::<f64>() / (rank as f64).sqrt()
                    + 0.3 * e[(i + rank) % p]
            })
            .collect();
        values.extend(map.forward(&z).unwrap().0);
    }
    DataMatrix::new(n, p, values).unwrap()
}

fn criteria_6_and_7() -> (Verdict, Verdict) {
    let start = Instant::now();
    let data = nonlinear_instance();
    let bench = BenchmarkConfig {
        folds: 5,
        seed: 0,
        mechanism: Mechanism::Mcar { rate: 0.2 },
        methods: vec![Method::Emflow, Method::BaselineEm, Method::Mean],
    };
    let train = protocol_config(bench.mechanism);
    let report = match kfold_benchmark(&data, &bench, &train, Execution::Parallel) {
        Ok(r) => r,
        Err(e) => {
            return (
                Verdict::Fail(format!("benchmark failed: {e}")),
                Verdict::Fail("no trace".into()),
            )
        }
    };
    let elapsed = start.elapsed();
    let get = |m| report.summary_for(m).unwrap();
    let (flow, em, mean) = (
        get(Method::Emflow),
        get(Method::BaselineEm),
        get(Method::Mean),
    );
    let c6 = check(
        flow.mean <= 0.9 * mean.mean && flow.mean <= 1.05 * em.mean && within_time(elapsed, 600),
        format!(
            "5-fold test RMSE emflow {} vs column mean {} ({:.1}% lower, need >=10%) and baseline EM {} \
             (ratio {:.3}, need <=1.05); {:.1}s",
            flow.formatted(),
            mean.formatted(),
            100.0 * (1.0 - flow.mean / mean.mean),
            em.formatted(),
            flow.mean / em.mean,
            elapsed.as_secs_f64()
        ),
    );
    let iters = report.folds[0].emflow_trace.len();
    let trace: Vec<f64> = (0..iters)
        .map(|t| {
            report.folds.iter().map(|f| f.emflow_trace[t]).sum::<f64>() / report.folds.len() as f64
        })
        .collect();
    let c7 =
        if iters < 3 {
            Verdict::Fail(format!("trace has {iters} iterations"))
        } else {
            let (third, last) = (trace[2], trace[iters - 1]);
            let rel = (third - last).abs() / last;
            check(
                rel <= 0.05,
                format!(
                "fold-mean test RMSE per iteration {:?}; iteration 3 within {:.2}% of final (<=5%)",
                trace.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
                100.0 * rel
            ),
            )
        };
    (c6, c7)
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Verdict {
    let Ok(path) = std::env::var("EMFLOW_WINE_CSV") else {
        let lower = mar_lower_bound_demo();
        return Verdict::Skip(format!(
            "set EMFLOW_WINE_CSV to a UCI wine-quality CSV to run; note: on [0,1]-scaled wine-shaped \
             synthetic data the MAR maskable rate is {lower:.3} (the formula gives >= 0.5 per row)"
        ));
    };
    let start = Instant::now();
    let first_line = std::fs::read_to_string(&path)
        .ok()
        .and_then(|s| s.lines().next().map(str::to_string));
    let delimiter = if first_line.is_some_and(|l| l.contains(';')) {
        b';'
    } else {
        b','
    };
    let (data, mask) = match read_data_csv(
        &path,
        &CsvOptions {
            delimiter,
            ..CsvOptions::default()
        },
    ) {
        Ok(d) => d,
        Err(e) => return Verdict::Fail(format!("cannot read {path}: {e}")),
    };
    if mask.missing_count() > 0 {
        return Verdict::Fail("wine file must be complete".into());
    }
    let bench = BenchmarkConfig {
        methods: vec![Method::Emflow, Method::Mean],
        ..BenchmarkConfig::default()
    };
    let report = match kfold_benchmark(
        &data,
        &bench,
        &protocol_config(bench.mechanism),
        Execution::Parallel,
    ) {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(format!("benchmark failed: {e}")),
    };
    let flow = report.summary_for(Method::Emflow).unwrap();
    let mean = report.summary_for(Method::Mean).unwrap();
    let rmse_ok = (flow.mean - 0.0757).abs() <= 0.03 || flow.mean <= 0.8 * mean.mean;
    let unit = fit_scaler(&data, &mask).unwrap().apply(&data).unwrap();
    let mar_rate = maskable_missing_fraction(&mar_mask(&unit, 0).unwrap(), Mechanism::Mar);
    let mar_ok = (mar_rate - 0.26).abs() <= 0.03;
    check(
        rmse_ok && mar_ok,
        format!(
            "MCAR 0.2 5-fold RMSE emflow {} (reference 0.0757±0.0013), column mean {}; MAR maskable rate {mar_rate:.3} \
             (reference 0.26±0.03); {:.1}s",
            flow.formatted(),
            mean.formatted(),
            start.elapsed().as_secs_f64()
        ),
    )
}

/// MAR maskable rate on uniform [0,1] data with 12 features.
fn mar_lower_bound_demo() -> f64 {
    let (n, p) = (2000, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let values = (0..n * p).map(|_| rng.random::<f64>()).collect();
    let data = DataMatrix::new(n, p, values).unwrap();
    maskable_missing_fraction(&mar_mask(&data, 1).unwrap(), Mechanism::Mar)
}

// ---------------------------------------------------------------- criterion 9

fn strip_time(trace: &[IterationRecord]) -> Vec<IterationRecord> {
    trace
        .iter()
        .cloned()
        .map(|r| IterationRecord {
            wall_time_s: 0.0,
            ..r
        })
        .collect()
}

fn criterion_9() -> Verdict {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut notes = Vec::new();

    // Observed-entry preservation and determinism through the engine.
    let (data, mask) = mvn_instance();
    let train: Vec<usize> = (0..300).collect();
    let test: Vec<usize> = (300..400).collect();
    let (dtr, mtr) = (data.select_rows(&train).unwrap(), mask.select_rows(&train));
    let (dte, mte) = (data.select_rows(&test).unwrap(), mask.select_rows(&test));
    let cfg = TrainConfig {
        outer_iterations: 2,
        epochs_per_phase: 2,
        batch_size: 64,
        depth: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let holdout = Holdout {
        data: &dte,
        mask: &mte,
        truth: Some(&dte),
    };
    let (a, ha) =
        run_with_holdout(&dtr, &mtr, &cfg, Some(&dtr), holdout, Execution::Sequential).unwrap();
    let (b, hb) =
        run_with_holdout(&dtr, &mtr, &cfg, Some(&dtr), holdout, Execution::Parallel).unwrap();
    let c = run(&dtr, &mtr, &cfg, Some(&dtr), Execution::Sequential).unwrap();
    let preserved = |imp: &DataMatrix, src: &DataMatrix, m: &MaskMatrix| {
        imp.as_slice()
            .iter()
            .zip(src.as_slice())
            .zip(m.as_slice())
            .all(|((x, y), &miss)| miss || x.to_bits() == y.to_bits())
    };
    if !(preserved(a.imputed.values(), &dtr, &mtr) && preserved(ha.values(), &dte, &mte)) {
        failures.push("observed entries changed".to_string());
    }
    if a.imputed != b.imputed || ha != hb || strip_time(&a.trace) != strip_time(&b.trace) {
        failures.push("sequential and parallel runs differ".to_string());
    }
    if a.imputed != c.imputed || a.flow != c.flow {
        failures.push("repeated run with the same seed differs".to_string());
    }
    notes.push("preservation + determinism ok".to_string());

    // MCAR: rate, chi-square on column marginals, determinism.
    let (n, p, rate) = (10_000, 10, 0.2);
    let m = mcar_mask(n, p, rate, 123).unwrap();
    let frac = m.missing_fraction();
    if (frac - rate).abs() > 0.01 {
        failures.push(format!("MCAR fraction {frac}"));
    }
    let chi2: f64 = (0..p)
        .map(|j| {
            let k = (n - m.observed_in_column(j)) as f64;
            let e = n as f64 * rate;
            (k - e).powi(2) / (e * (1.0 - rate))
        })
        .sum();
    let p_value = 1.0 - ChiSquared::new(p as f64).unwrap().cdf(chi2);
    if p_value < 0.01 {
        failures.push(format!("MCAR column chi-square p = {p_value:.4}"));
    }
    if m != mcar_mask(n, p, rate, 123).unwrap()
        || mcar_mask(50, 4, 0.0, 1).unwrap().missing_count() != 0
    {
        failures.push("MCAR determinism / zero rate".to_string());
    }
    notes.push(format!("MCAR fraction {frac:.4}, chi2 p {p_value:.3}"));

    // MAR: retained block observed, sigmoid(0) = 0.5, row locality.
    let zeros = DataMatrix::new(4000, 10, vec![0.0; 40_000]).unwrap();
    let mz = mar_mask(&zeros, 3).unwrap();
    let keep = mar_retained(10);
    if (0..keep).any(|j| mz.observed_in_column(j) != 4000) {
        failures.push("MAR retained column has missing cells".to_string());
    }
    let zero_rate = maskable_missing_fraction(&mz, Mechanism::Mar);
    let sd = (0.25 / (4000.0 * 3.0) as f64).sqrt();
    if (zero_rate - 0.5).abs() > 4.0 * sd {
        failures.push(format!("MAR rate at sigmoid(0) is {zero_rate}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let unit = DataMatrix::new(50, 10, (0..500).map(|_| rng.random::<f64>()).collect()).unwrap();
    let base_mask = mar_mask(&unit, 4).unwrap();
    let mut perm: Vec<usize> = (0..50).collect();
    perm[1..].shuffle(&mut rng);
    let permuted = mar_mask(&unit.select_rows(&perm).unwrap(), 4).unwrap();
    if permuted.row(0) != base_mask.row(0) {
        failures.push("MAR row 0 depends on other rows".to_string());
    }
    notes.push(format!("MAR sigmoid(0) rate {zero_rate:.4}"));

    let elapsed = start.elapsed();
    if !within_time(elapsed, 120) {
        failures.push("over 2 minutes".to_string());
    }
    let detail = format!("{}; {:.1}s", notes.join(", "), elapsed.as_secs_f64());
    if failures.is_empty() {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(format!("{}; {detail}", failures.join("; ")))
    }
}

// ---------------------------------------------------------------- driver

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Verdict::Fail(format!("panicked: {msg}"))
    })
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("EMFLOW_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));

    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut record = |id: u32, name: &'static str, v: Verdict| {
        report_line(id, name, &v);
        results.push((id, name, v));
    };
    let single: [(u32, &'static str, fn() -> Verdict); 5] = [
        (1, "flow invertibility and log-det", criterion_1),
        (2, "gradient oracle", criterion_2),
        (3, "conditional Gaussian oracle", criterion_3),
        (4, "batch EM sanity", criterion_4),
        (5, "online vs batch EM", criterion_5),
    ];
    for (id, name, f) in single {
        if wanted(id) {
            record(id, name, guarded(f));
        }
    }
    if wanted(6) || wanted(7) {
        let (c6, c7) = guarded_pair(criteria_6_and_7);
        for (id, name, v) in [(6, "nonlinear benchmark", c6), (7, "convergence speed", c7)] {
            if wanted(id) {
                record(id, name, v);
            }
        }
    }
    let tail: [(u32, &'static str, fn() -> Verdict); 2] = [
        (8, "wine reproduction (optional)", criterion_8),
        (9, "invariant regression", criterion_9),
    ];
    for (id, name, f) in tail {
        if wanted(id) {
            record(id, name, guarded(f));
        }
    }

    let failed: Vec<u32> = results
        .iter()
        .filter(|(_, _, v)| matches!(v, Verdict::Fail(_)))
        .map(|(id, _, _)| *id)
        .collect();
    println!(
        "acceptance: {} passed, {} failed, {} skipped",
        results
            .iter()
            .filter(|(_, _, v)| matches!(v, Verdict::Pass(_)))
            .count(),
        failed.len(),
        results
            .iter()
            .filter(|(_, _, v)| matches!(v, Verdict::Skip(_)))
            .count()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

fn guarded_pair(f: impl FnOnce() -> (Verdict, Verdict)) -> (Verdict, Verdict) {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| {
        (
            Verdict::Fail("panicked".into()),
            Verdict::Fail("panicked".into()),
        )
    })
}

fn report_line(id: u32, name: &str, v: &Verdict) {
    let (tag, detail) = match v {
        Verdict::Pass(d) => ("PASS", d),
        Verdict::Fail(d) => ("FAIL", d),
        Verdict::Skip(d) => ("SKIP", d),
    };
    println!("criterion {id} [{name}]: {tag} - {detail}");
}
