//! Outer imputation loop: each iteration reinitializes the flow, trains it
//! together with online EM on mini-batches of the current imputation (which
//! stays frozen), then re-imputes missing cells through the latent space with
//! every parameter frozen.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    initial_impute, initial_impute_with_reference, DataMatrix, ImputedDataset, InitStrategy,
    MaskMatrix,
};
use crate::error::{EmflowError, Result};
use crate::eval::rmse_missing;
use crate::exec::Execution;
use crate::flow::{
    default_hidden, grad_step, loss_l1, reinit_flow, Adam, CompositeGradient, FlowModel, LossBatch,
    DEFAULT_DEPTH,
};
use crate::gaussian::{GaussianParams, PatternPlans};
use crate::online_em::{EmConfig, OnlineEmState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub outer_iterations: usize,
    /// Passes over the data per training phase.
    pub epochs_per_phase: usize,
    /// Mini-batch size; batches never exceed the number of rows.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the observed-coordinate reconstruction penalty.
    pub alpha: f64,
    /// Number of coupling layers.
    pub depth: usize,
    /// Hidden width of the scale/shift nets; `None` picks max(32, 4p) ≤ 256.
    pub hidden: Option<usize>,
    pub em: EmConfig,
    pub init_strategy: InitStrategy,
    /// Differentiation of the likelihood term in the composite loss.
    pub composite_gradient: CompositeGradient,
    /// Keep the flow at the identity (no gradient steps).
    pub freeze_flow: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_iterations: 5,
            epochs_per_phase: 10,
            batch_size: 256,
            learning_rate: 1e-4,
            alpha: 1e6,
            depth: DEFAULT_DEPTH,
            hidden: None,
            em: EmConfig::default(),
            init_strategy: InitStrategy::RandomObserved,
            composite_gradient: CompositeGradient::Detached,
            freeze_flow: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs_per_phase == 0 {
            out.push("epochs_per_phase must be >= 1".to_string());
        }
        if self.batch_size < 2 {
            out.push(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            out.push(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            out.push(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if self.depth == 0 {
            out.push("depth must be >= 1".to_string());
        }
        if self.hidden == Some(0) {
            out.push("hidden must be >= 1".to_string());
        }
        out.extend(self.em.problems());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(EmflowError::InvalidConfig(problems))
        }
    }

    pub fn hidden_for(&self, p: usize) -> usize {
        self.hidden.unwrap_or_else(|| default_hidden(p))
    }
}

/// One line of the trace, written per outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub beta: f64,
    /// Mean likelihood loss over the first and the last epoch of the phase.
    pub l1_first_epoch: f64,
    pub l1_last_epoch: f64,
    pub l2_last_epoch: f64,
    pub grad_steps: u64,
    pub em_updates: u64,
    pub train_rmse: Option<f64>,
    pub test_rmse: Option<f64>,
    pub wall_time_s: f64,
}

/// Counters and mean losses of a training phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhaseStats {
    pub l1_per_epoch: Vec<f64>,
    pub l2_per_epoch: Vec<f64>,
    pub grad_steps: u64,
    pub em_updates: u64,
}

/// Parameters of a finished or checkpointed run.
#[derive(Debug, Clone)]
pub struct ImputationRun {
    pub imputed: ImputedDataset,
    pub flow: FlowModel,
    pub base: GaussianParams,
    pub em_state: Option<OnlineEmState>,
    pub trace: Vec<IterationRecord>,
    pub config: TrainConfig,
}

fn gather(rows: &[usize], src: &[f64], p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * p);
    for &i in rows {
        out.extend_from_slice(&src[i * p..(i + 1) * p]);
    }
    out
}

fn gather_mask(rows: &[usize], src: &[bool], p: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(rows.len() * p);
    for &i in rows {
        out.extend_from_slice(&src[i * p..(i + 1) * p]);
    }
    out
}

/// Separate Adam moments for the two flow updates of each batch. The
/// composite loss carries the α-weighted reconstruction term, whose gradient
/// magnitudes would otherwise swamp the second-moment estimate of the
/// likelihood step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseOptimizers {
    pub likelihood: Adam,
    pub composite: Adam,
}

impl PhaseOptimizers {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Self {
            likelihood: Adam::new(lr, num_params),
            composite: Adam::new(lr, num_params),
        }
    }

    /// Total gradient steps taken.
    pub fn steps(&self) -> u64 {
        self.likelihood.steps() + self.composite.steps()
    }
}

/// Maps every row of a flat batch to the latent space.
pub fn to_latent(flow: &FlowModel, rows: &[f64], exec: Execution) -> Result<Vec<f64>> {
    let p = flow.p();
    let parts = exec.map_chunks(rows.len() / p, |range| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(range.len() * p);
        for i in range {
            out.extend(flow.inverse(&rows[i * p..(i + 1) * p])?.0);
        }
        Ok(out)
    });
    Ok(parts.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

/// Trains the flow and the latent Gaussian on mini-batches of `imputed`,
/// which is left untouched. An absent Gaussian is initialized from the
/// latent embedding of the first mini-batch with robustification `beta`.
#[allow(clippy::too_many_arguments)]
pub fn training_phase(
    imputed: &ImputedDataset,
    flow: &mut FlowModel,
    em_slot: &mut Option<OnlineEmState>,
    beta: f64,
    optimizers: &mut PhaseOptimizers,
    config: &TrainConfig,
    iteration: usize,
    rng: &mut ChaCha8Rng,
    exec: Execution,
) -> Result<PhaseStats> {
    let (n, p) = (imputed.n(), imputed.p());
    let batch_size = config.batch_size.min(n).max(1);
    let values = imputed.values().as_slice();
    let masks = imputed.mask().as_slice();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = PhaseStats::default();
    let steps_before = optimizers.steps();
    for epoch in 0..config.epochs_per_phase {
        order.shuffle(rng);
        let (mut l1_sum, mut l2_sum, mut batches) = (0.0, 0.0, 0usize);
        for (batch, rows) in order.chunks(batch_size).enumerate() {
            let bad_loss = || EmflowError::NonFiniteLoss {
                iteration,
                epoch,
                batch,
            };
            let current = gather(rows, values, p);
            let batch_masks = gather_mask(rows, masks, p);
            let em = match em_slot {
                Some(em) => em,
                None => {
                    let latent = to_latent(flow, &current, exec)?;
                    em_slot.insert(OnlineEmState::init_from_batch(
                        &latent,
                        p,
                        config.em.clone(),
                        beta,
                        exec,
                    )?)
                }
            };

            let l1 = if config.freeze_flow {
                loss_l1(&current, flow, em.params(), exec)?
            } else {
                let base = em.params().factor()?;
                grad_step(
                    flow,
                    &base,
                    LossBatch::Likelihood { data: &current },
                    &mut optimizers.likelihood,
                    exec,
                )?
            };
            if !l1.is_finite() {
                return Err(bad_loss());
            }

            let latent = to_latent(flow, &current, exec)?;
            let imputed_latent = em.em_update(&latent, &batch_masks, exec)?;
            stats.em_updates += 1;

            let l2 = if config.freeze_flow {
                0.0
            } else {
                let base = em.params().factor()?;
                grad_step(
                    flow,
                    &base,
                    LossBatch::Composite {
                        latent: &imputed_latent,
                        current: &current,
                        masks: &batch_masks,
                        alpha: config.alpha,
                        gradient: config.composite_gradient,
                    },
                    &mut optimizers.composite,
                    exec,
                )?
            };
            if !l2.is_finite() {
                return Err(bad_loss());
            }
            l1_sum += l1;
            l2_sum += l2;
            batches += 1;
        }
        stats.l1_per_epoch.push(l1_sum / batches as f64);
        stats.l2_per_epoch.push(l2_sum / batches as f64);
    }
    stats.grad_steps = optimizers.steps() - steps_before;
    Ok(stats)
}

/// Replaces missing cells with f(E[z_m | z_o]) where z = f⁻¹(x̂), keeping
/// observed cells; flow and base are read-only.
pub fn reimputation_phase(
    imputed: &ImputedDataset,
    flow: &FlowModel,
    base: &GaussianParams,
    exec: Execution,
) -> Result<ImputedDataset> {
    let p = imputed.p();
    if flow.p() != p || base.dim() != p {
        return Err(EmflowError::Shape(
            "flow/base dimension differs from data".into(),
        ));
    }
    let values = imputed.values().as_slice();
    let masks = imputed.mask().as_slice();
    let plans = PatternPlans::new(base, masks, p)?;
    let parts = exec.map_chunks(imputed.n(), |range| -> Result<Vec<(usize, Vec<f64>)>> {
        let mut out = Vec::new();
        for i in range {
            let plan = plans.plan_for_row(i);
            if plan.missing_idx.is_empty() {
                continue;
            }
            let (mut z, _) = flow.inverse(&values[i * p..(i + 1) * p])?;
            plan.impute_in_place(&mut z, base.mean());
            out.push((i, flow.forward(&z)?.0));
        }
        Ok(out)
    });
    let mut next = imputed.clone();
    for part in parts {
        for (i, row) in part? {
            next.fill_missing(i, &row);
        }
    }
    Ok(next)
}

/// Held-out rows that only go through re-imputation with the trained model.
#[derive(Debug, Clone, Copy)]
pub struct Holdout<'a> {
    pub data: &'a DataMatrix,
    pub mask: &'a MaskMatrix,
    pub truth: Option<&'a DataMatrix>,
}

/// Resumable state of a run between outer iterations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub completed_iterations: usize,
    pub flow: FlowModel,
    pub base: Option<GaussianParams>,
    pub em_state: Option<OnlineEmState>,
    pub rng: ChaCha8Rng,
    pub imputed: ImputedDataset,
    pub trace: Vec<IterationRecord>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
        let ck: Checkpoint = serde_json::from_reader(file)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(EmflowError::Parse(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        ck.flow.validate()?;
        Ok(ck)
    }
}

/// Drives the outer loop one iteration at a time.
pub struct Runner<'a> {
    config: TrainConfig,
    exec: Execution,
    truth: Option<&'a DataMatrix>,
    holdout: Option<(ImputedDataset, Option<&'a DataMatrix>)>,
    imputed: ImputedDataset,
    flow: FlowModel,
    em: Option<OnlineEmState>,
    rng: ChaCha8Rng,
    completed: usize,
    trace: Vec<IterationRecord>,
}

impl<'a> Runner<'a> {
    pub fn new(
        data: &DataMatrix,
        mask: &MaskMatrix,
        config: TrainConfig,
        truth: Option<&'a DataMatrix>,
        holdout: Option<Holdout<'a>>,
        exec: Execution,
    ) -> Result<Self> {
        config.validate()?;
        let p = data.p();
        let imputed = initial_impute(data, mask, config.init_strategy, config.seed)?;
        let holdout = match holdout {
            Some(h) => Some((
                initial_impute_with_reference(
                    h.data,
                    h.mask,
                    data,
                    mask,
                    config.init_strategy,
                    config.seed ^ 0x5eed_0f7e57,
                )?,
                h.truth,
            )),
            None => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let flow = reinit_flow(p, config.depth, config.hidden_for(p), rng.random())?;
        Ok(Self {
            config,
            exec,
            truth,
            holdout,
            imputed,
            flow,
            em: None,
            rng,
            completed: 0,
            trace: Vec::new(),
        })
    }

    /// Continues a checkpointed run on the same training data.
    pub fn resume(ck: Checkpoint, truth: Option<&'a DataMatrix>, exec: Execution) -> Result<Self> {
        ck.config.validate()?;
        Ok(Self {
            config: ck.config,
            exec,
            truth,
            holdout: None,
            imputed: ck.imputed,
            flow: ck.flow,
            em: ck.em_state,
            rng: ck.rng,
            completed: ck.completed_iterations,
            trace: ck.trace,
        })
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    pub fn imputed(&self) -> &ImputedDataset {
        &self.imputed
    }

    pub fn holdout_imputed(&self) -> Option<&ImputedDataset> {
        self.holdout.as_ref().map(|(h, _)| h)
    }

    pub fn trace(&self) -> &[IterationRecord] {
        &self.trace
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            completed_iterations: self.completed,
            flow: self.flow.clone(),
            base: self.em.as_ref().map(|e| e.params().clone()),
            em_state: self.em.clone(),
            rng: self.rng.clone(),
            imputed: self.imputed.clone(),
            trace: self.trace.clone(),
        }
    }

    /// Runs one outer iteration and returns its trace record.
    pub fn step(&mut self) -> Result<&IterationRecord> {
        let started = Instant::now();
        let iteration = self.completed + 1;
        let p = self.imputed.p();
        let exec = self.exec;

        self.flow = reinit_flow(
            p,
            self.config.depth,
            self.config.hidden_for(p),
            self.rng.random(),
        )?;
        let mut optimizers =
            PhaseOptimizers::new(self.config.learning_rate, self.flow.num_params());
        let beta = self.config.em.beta_schedule.beta_at(iteration);
        let mut em = if self.config.em.reinit_each_iteration {
            None
        } else {
            self.em.take()
        };
        if let Some(em) = em.as_mut() {
            em.set_beta(beta)?;
        }

        let stats = training_phase(
            &self.imputed,
            &mut self.flow,
            &mut em,
            beta,
            &mut optimizers,
            &self.config,
            iteration,
            &mut self.rng,
            exec,
        )?;
        let em = em.expect("training phase initializes the Gaussian");
        self.imputed = reimputation_phase(&self.imputed, &self.flow, em.params(), exec)?;
        if let Some((h, _)) = self.holdout.as_mut() {
            *h = reimputation_phase(h, &self.flow, em.params(), exec)?;
        }

        let train_rmse = match self.truth {
            Some(t) if self.imputed.mask().missing_count() > 0 => {
                Some(rmse_missing(self.imputed.values(), t, self.imputed.mask())?)
            }
            _ => None,
        };
        let test_rmse = match &self.holdout {
            Some((h, Some(t))) if h.mask().missing_count() > 0 => {
                Some(rmse_missing(h.values(), t, h.mask())?)
            }
            _ => None,
        };
        self.em = Some(em);
        self.completed = iteration;
        self.trace.push(IterationRecord {
            iteration,
            beta,
            l1_first_epoch: stats.l1_per_epoch[0],
            l1_last_epoch: *stats.l1_per_epoch.last().unwrap(),
            l2_last_epoch: *stats.l2_per_epoch.last().unwrap(),
            grad_steps: stats.grad_steps,
            em_updates: stats.em_updates,
            train_rmse,
            test_rmse,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        let rec = self.trace.last().unwrap();
        log::info!(
            "iteration {iteration}: L1 {:.4} -> {:.4}, train RMSE {:?}, test RMSE {:?}",
            rec.l1_first_epoch,
            rec.l1_last_epoch,
            rec.train_rmse,
            rec.test_rmse
        );
        Ok(rec)
    }

    /// Runs the remaining outer iterations.
    pub fn run_to_end(&mut self) -> Result<()> {
        while self.completed < self.config.outer_iterations {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(self) -> ImputationRun {
        let base = self.em.as_ref().map_or_else(
            || GaussianParams::standard(self.imputed.p()),
            |e| e.params().clone(),
        );
        ImputationRun {
            imputed: self.imputed,
            flow: self.flow,
            base,
            em_state: self.em,
            trace: self.trace,
            config: self.config,
        }
    }

    /// Finishes and also returns the re-imputed holdout, if any.
    pub fn finish_with_holdout(mut self) -> (ImputationRun, Option<ImputedDataset>) {
        let h = self.holdout.take().map(|(h, _)| h);
        (self.finish(), h)
    }
}

/// Full run on scaled data. `truth`, if given, must be in the same space.
pub fn run(
    data: &DataMatrix,
    mask: &MaskMatrix,
    config: &TrainConfig,
    truth: Option<&DataMatrix>,
    exec: Execution,
) -> Result<ImputationRun> {
    let mut runner = Runner::new(data, mask, config.clone(), truth, None, exec)?;
    runner.run_to_end()?;
    Ok(runner.finish())
}

/// Full run that also re-imputes held-out rows with each iteration's model.
pub fn run_with_holdout<'a>(
    data: &DataMatrix,
    mask: &MaskMatrix,
    config: &TrainConfig,
    truth: Option<&'a DataMatrix>,
    holdout: Holdout<'a>,
    exec: Execution,
) -> Result<(ImputationRun, ImputedDataset)> {
    let mut runner = Runner::new(data, mask, config.clone(), truth, Some(holdout), exec)?;
    runner.run_to_end()?;
    let (run, h) = runner.finish_with_holdout();
    Ok((run, h.expect("holdout was supplied")))
}

pub fn write_trace_jsonl(path: impl AsRef<Path>, trace: &[IterationRecord]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    for rec in trace {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
