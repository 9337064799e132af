//! `emflow` command-line front end: mask simulation, imputation, k-fold
//! benchmarking and standalone RMSE evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use emflow::baseline_em::{
    batch_em_fit, batch_em_impute, default_init, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use emflow::data::{
    fit_scaler, DataMatrix, FeatureScaler, ImputedDataset, InitStrategy, MaskMatrix,
};
use emflow::engine::{write_trace_jsonl, Checkpoint, Runner, TrainConfig};
use emflow::eval::{kfold_benchmark, protocol_config, rmse_missing, BenchmarkConfig, Method};
use emflow::exec::with_threads;
use emflow::flow::CompositeGradient;
use emflow::io::{read_data_csv, read_mask_csv, write_data_csv, write_mask_csv, CsvOptions};
use emflow::masking::{mar_retained, maskable_missing_fraction, simulate, Mechanism};
use emflow::online_em::BetaSchedule;
use emflow::{EmflowError, Execution};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "emflow",
    version,
    about = "Missing-data imputation with normalizing flows and online EM"
)]
struct Cli {
    /// Worker threads for data-parallel work (1 runs everything sequentially).
    #[arg(long, global = true, env = "EMFLOW_THREADS")]
    threads: Option<usize>,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a missingness mask for a complete CSV.
    Mask(MaskArgs),
    /// Impute the missing cells of a CSV.
    Impute(ImputeArgs),
    /// k-fold cross-validated imputation benchmark on a complete CSV.
    Benchmark(BenchmarkArgs),
    /// RMSE over masked cells, in [0,1] space scaled by the truth's observed cells.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Clone)]
struct CsvArgs {
    /// Input CSV files have no header row.
    #[arg(long)]
    no_header: bool,
    /// Field delimiter.
    #[arg(long, default_value = ",")]
    delimiter: char,
    /// Token marking a missing value (empty fields are always missing).
    #[arg(long, default_value = "NA")]
    na_token: String,
}

impl CsvArgs {
    fn options(&self) -> Result<CsvOptions, CliError> {
        if !self.delimiter.is_ascii() {
            return Err(CliError::usage(
                "--delimiter must be a single ASCII character",
            ));
        }
        Ok(CsvOptions {
            has_header: !self.no_header,
            na_token: self.na_token.clone(),
            delimiter: self.delimiter as u8,
        })
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MechanismArg {
    Mcar,
    Mar,
}

#[derive(Args, Debug, Clone)]
struct MechanismArgs {
    #[arg(long, value_enum, default_value = "mcar")]
    mechanism: MechanismArg,
    /// Missing rate for MCAR.
    #[arg(long, default_value_t = 0.2)]
    rate: f64,
}

impl MechanismArgs {
    fn mechanism(&self) -> Mechanism {
        match self.mechanism {
            MechanismArg::Mcar => Mechanism::Mcar { rate: self.rate },
            MechanismArg::Mar => Mechanism::Mar,
        }
    }
}

#[derive(Args, Debug)]
struct MaskArgs {
    input: PathBuf,
    #[command(flatten)]
    mechanism: MechanismArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mask CSV to write (default: <input>.mask.csv); a JSON sidecar goes next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    csv: CsvArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ImputerArg {
    Emflow,
    BaselineEm,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum BetaArg {
    None,
    Tabular,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum GradientArg {
    Detached,
    Total,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum InitArg {
    RandomObserved,
    Median,
    NearestNeighborGrid,
}

/// Training options; each overrides the config file, which overrides defaults.
#[derive(Args, Debug, Clone, Default)]
struct TrainArgs {
    /// TOML file with training options.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    outer_iterations: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Weight of the reconstruction penalty.
    #[arg(long)]
    alpha: Option<f64>,
    /// Number of coupling layers.
    #[arg(long)]
    depth: Option<usize>,
    /// Hidden width of the coupling networks.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    /// Step-size scale C in rho_t = C t^-gamma.
    #[arg(long)]
    em_c: Option<f64>,
    #[arg(long)]
    em_gamma: Option<f64>,
    /// Covariance inflation schedule.
    #[arg(long, value_enum)]
    beta_schedule: Option<BetaArg>,
    /// Super-batch size for online EM (0 disables).
    #[arg(long)]
    superbatch: Option<usize>,
    /// Keep the latent Gaussian across outer iterations instead of reinitializing it.
    #[arg(long)]
    keep_base: bool,
    #[arg(long, value_enum)]
    composite_gradient: Option<GradientArg>,
    /// Keep the flow at the identity (online EM in data space).
    #[arg(long)]
    freeze_flow: bool,
}

impl TrainArgs {
    /// Defaults, then the config file, then flags.
    fn resolve(&self, defaults: TrainConfig) -> Result<TrainConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::usage(format!("cannot read config {}: {e}", path.display()))
                })?;
                let table: toml::Table = text.parse().map_err(|e| {
                    CliError::usage(format!("invalid config {}: {e}", path.display()))
                })?;
                let mut merged = toml::Table::try_from(&defaults).expect("config serializes");
                merge(&mut merged, table);
                toml::Value::Table(merged).try_into().map_err(|e| {
                    CliError::usage(format!("invalid config {}: {e}", path.display()))
                })?
            }
            None => defaults,
        };
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag {
                    $field = v;
                }
            };
        }
        set!(self.outer_iterations, cfg.outer_iterations);
        set!(self.epochs, cfg.epochs_per_phase);
        set!(self.batch_size, cfg.batch_size);
        set!(self.learning_rate, cfg.learning_rate);
        set!(self.alpha, cfg.alpha);
        set!(self.depth, cfg.depth);
        set!(self.seed, cfg.seed);
        set!(self.em_c, cfg.em.c);
        set!(self.em_gamma, cfg.em.gamma);
        set!(self.superbatch, cfg.em.superbatch_max);
        if let Some(h) = self.hidden {
            cfg.hidden = Some(h);
        }
        if let Some(init) = self.init {
            cfg.init_strategy = match init {
                InitArg::RandomObserved => InitStrategy::RandomObserved,
                InitArg::Median => InitStrategy::Median,
                InitArg::NearestNeighborGrid => InitStrategy::NearestNeighborGrid,
            };
        }
        if let Some(b) = self.beta_schedule {
            cfg.em.beta_schedule = match b {
                BetaArg::None => BetaSchedule::none(),
                BetaArg::Tabular => BetaSchedule::tabular(),
            };
        }
        if let Some(g) = self.composite_gradient {
            cfg.composite_gradient = match g {
                GradientArg::Detached => CompositeGradient::Detached,
                GradientArg::Total => CompositeGradient::Total,
            };
        }
        if self.keep_base {
            cfg.em.reinit_each_iteration = false;
        }
        if self.freeze_flow {
            cfg.freeze_flow = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Args, Debug)]
struct ImputeArgs {
    /// Data CSV; empty or NA cells are missing.
    data: PathBuf,
    /// Mask CSV (0/1, 1 = missing); defaults to the NA cells of the data.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Complete ground-truth CSV; adds per-iteration RMSE to the trace.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "emflow")]
    imputer: ImputerArg,
    /// Output directory for imputed.csv, checkpoint.json, trace.jsonl and run.json.
    #[arg(long, default_value = "emflow-out")]
    out_dir: PathBuf,
    /// Continue from a checkpoint written by an earlier run on the same data.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    csv: CsvArgs,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// Complete data CSV.
    data: PathBuf,
    #[command(flatten)]
    mechanism: MechanismArgs,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Seed for the fold split and the simulated mask.
    #[arg(long = "split-seed", default_value_t = 0)]
    split_seed: u64,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_values = ["emflow", "baseline-em", "mean", "median"])]
    methods: Vec<MethodArg>,
    /// Output directory for report.json and report.txt.
    #[arg(long, default_value = "emflow-benchmark")]
    out_dir: PathBuf,
    /// Also write per-fold metrics as folds.csv.
    #[arg(long)]
    csv_folds: bool,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    csv: CsvArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum MethodArg {
    Emflow,
    BaselineEm,
    Mean,
    Median,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Emflow => Method::Emflow,
            MethodArg::BaselineEm => Method::BaselineEm,
            MethodArg::Mean => Method::Mean,
            MethodArg::Median => Method::Median,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    imputed: PathBuf,
    truth: PathBuf,
    mask: PathBuf,
    /// Compare raw values instead of [0,1]-scaled ones.
    #[arg(long)]
    raw: bool,
    #[command(flatten)]
    csv: CsvArgs,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<EmflowError> for CliError {
    fn from(e: EmflowError) -> Self {
        if e.is_numerical() {
            let module = match e {
                EmflowError::NotPositiveDefinite { .. } => "gaussian",
                EmflowError::NonFiniteLoss { .. } => "engine",
                _ => "flow",
            };
            Self {
                code: EXIT_NUMERICAL,
                message: format!("numerical failure in {module}: {e}"),
            }
        } else {
            Self::usage(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let threads = cli.threads;
    if threads == Some(0) {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(EXIT_USAGE);
    }
    let exec = if threads == Some(1) {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let body = move || match cli.command {
        Command::Mask(a) => cmd_mask(a),
        Command::Impute(a) => cmd_impute(a, exec),
        Command::Benchmark(a) => cmd_benchmark(a, exec),
        Command::Eval(a) => cmd_eval(a),
    };
    let result = match threads {
        Some(n) if n > 1 => with_threads(n, body),
        _ => body(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::usage(e.to_string()))?;
    std::fs::write(path, text + "\n")
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))
}

fn read_complete(path: &Path, opts: &CsvOptions) -> Result<DataMatrix, CliError> {
    let (data, mask) = read_data_csv(path, opts)?;
    if mask.missing_count() > 0 {
        return Err(CliError::usage(format!(
            "{} has {} missing cells; a complete file is required",
            path.display(),
            mask.missing_count()
        )));
    }
    Ok(data)
}

#[derive(Serialize)]
struct MaskSidecar<'a> {
    input: &'a Path,
    mechanism: Mechanism,
    formula: &'static str,
    seed: u64,
    n: usize,
    p: usize,
    retained_features: usize,
    preexisting_missing: usize,
    missing_fraction: f64,
    maskable_missing_fraction: f64,
}

fn cmd_mask(a: MaskArgs) -> Result<(), CliError> {
    let opts = a.csv.options()?;
    let (data, existing) = read_data_csv(&a.input, &opts)?;
    let mechanism = a.mechanism.mechanism();
    // MAR probabilities are defined on [0, 1]-scaled features.
    let unit = fit_scaler(&data, &existing)?.apply(&data)?;
    let mut mask = simulate(&unit, mechanism, a.seed)?;
    for i in 0..mask.n() {
        for j in 0..mask.p() {
            if existing.is_missing(i, j) {
                mask.set(i, j, true);
            }
        }
    }
    let out = a.out.unwrap_or_else(|| a.input.with_extension("mask.csv"));
    write_mask_csv(&out, &mask)?;
    let sidecar = MaskSidecar {
        input: &a.input,
        mechanism,
        formula: match mechanism {
            Mechanism::Mcar { .. } => "each cell missing independently with probability rate",
            Mechanism::Mar => "features after the first floor(0.7p) missing with probability sigmoid(sum of the first floor(0.7p) scaled features)",
        },
        seed: a.seed,
        n: mask.n(),
        p: mask.p(),
        retained_features: match mechanism {
            Mechanism::Mcar { .. } => 0,
            Mechanism::Mar => mar_retained(mask.p()),
        },
        preexisting_missing: existing.missing_count(),
        missing_fraction: mask.missing_fraction(),
        maskable_missing_fraction: maskable_missing_fraction(&mask, mechanism),
    };
    write_json(&out.with_extension("json"), &sidecar)?;
    println!(
        "wrote {} ({}x{}), missing fraction {:.4}, maskable-block fraction {:.4}",
        out.display(),
        mask.n(),
        mask.p(),
        sidecar.missing_fraction,
        sidecar.maskable_missing_fraction
    );
    Ok(())
}

/// Reads the data and resolves its mask: the mask file (if any) must cover
/// every empty/NA cell.
fn load_incomplete(
    a: &ImputeArgs,
    opts: &CsvOptions,
) -> Result<(DataMatrix, MaskMatrix), CliError> {
    let (data, na) = read_data_csv(&a.data, opts)?;
    let mask = match &a.mask {
        None => na,
        Some(path) => {
            let m = read_mask_csv(path)?;
            if m.n() != data.n() || m.p() != data.p() {
                return Err(CliError::usage(format!(
                    "mask is {}x{} but data is {}x{}",
                    m.n(),
                    m.p(),
                    data.n(),
                    data.p()
                )));
            }
            if let Some(k) =
                (0..na.as_slice().len()).find(|&k| na.as_slice()[k] && !m.as_slice()[k])
            {
                return Err(CliError::usage(format!(
                    "data cell (row {}, column {}) is empty but not marked missing in the mask",
                    k / data.p() + 1,
                    k % data.p() + 1
                )));
            }
            m
        }
    };
    Ok((data, mask))
}

/// Inverts the scaling and puts the original observed values back verbatim.
fn to_original_scale(
    imputed: &DataMatrix,
    scaler: &FeatureScaler,
    original: &DataMatrix,
    mask: &MaskMatrix,
) -> Result<DataMatrix, CliError> {
    let back = scaler.invert(imputed)?;
    let values = back
        .as_slice()
        .iter()
        .zip(original.as_slice())
        .zip(mask.as_slice())
        .map(|((&b, &o), &m)| if m { b } else { o })
        .collect();
    let mut out = DataMatrix::new(original.n(), original.p(), values)?;
    if let Some(names) = original.feature_names() {
        out = out.with_feature_names(names.to_vec())?;
    }
    Ok(out)
}

#[derive(Serialize)]
struct RunSummary<'a> {
    imputer: ImputerArg,
    data: &'a Path,
    mask: Option<&'a Path>,
    truth: Option<&'a Path>,
    n: usize,
    p: usize,
    missing_cells: usize,
    config: Option<&'a TrainConfig>,
    scaler: &'a FeatureScaler,
    completed_iterations: usize,
    final_rmse: Option<f64>,
    batch_em_iterations: Option<usize>,
    batch_em_converged: Option<bool>,
}

fn cmd_impute(a: ImputeArgs, exec: Execution) -> Result<(), CliError> {
    let opts = a.csv.options()?;
    let (data, mask) = load_incomplete(&a, &opts)?;
    let scaler = fit_scaler(&data, &mask)?;
    let scaled = scaler.apply(&data)?;
    let truth = match &a.truth {
        Some(path) => {
            let t = read_complete(path, &opts)?;
            if t.n() != data.n() || t.p() != data.p() {
                return Err(CliError::usage("truth and data shapes differ"));
            }
            Some(scaler.apply(&t)?)
        }
        None => None,
    };
    create_dir(&a.out_dir)?;
    let imputed_path = a.out_dir.join("imputed.csv");
    let mut summary = RunSummary {
        imputer: a.imputer,
        data: &a.data,
        mask: a.mask.as_deref(),
        truth: a.truth.as_deref(),
        n: data.n(),
        p: data.p(),
        missing_cells: mask.missing_count(),
        config: None,
        scaler: &scaler,
        completed_iterations: 0,
        final_rmse: None,
        batch_em_iterations: None,
        batch_em_converged: None,
    };

    let final_rmse = |imputed: &ImputedDataset| -> Result<Option<f64>, CliError> {
        match &truth {
            Some(t) if mask.missing_count() > 0 => {
                Ok(Some(rmse_missing(imputed.values(), t, &mask)?))
            }
            _ => Ok(None),
        }
    };

    match a.imputer {
        ImputerArg::BaselineEm => {
            let fit = batch_em_fit(
                &scaled,
                &mask,
                default_init(&scaled, &mask)?,
                DEFAULT_MAX_ITER,
                DEFAULT_TOL,
                exec,
            )?;
            let imputed = batch_em_impute(&scaled, &mask, &fit.params, exec)?;
            let out = to_original_scale(imputed.values(), &scaler, &data, &mask)?;
            write_data_csv(&imputed_path, &out, None, &opts)?;
            summary.final_rmse = final_rmse(&imputed)?;
            summary.batch_em_iterations = Some(fit.iterations);
            summary.batch_em_converged = Some(fit.converged);
            write_json(&a.out_dir.join("run.json"), &summary)?;
            println!(
                "baseline EM: {} iterations, converged {}",
                fit.iterations, fit.converged
            );
        }
        ImputerArg::Emflow => {
            let checkpoint_path = a.out_dir.join("checkpoint.json");
            let trace_path = a.out_dir.join("trace.jsonl");
            let mut runner = match &a.resume {
                Some(path) => {
                    let mut ck = Checkpoint::load(path)?;
                    if ck.imputed.mask() != &mask {
                        return Err(CliError::usage(
                            "checkpoint was written for a different mask",
                        ));
                    }
                    if let Some(k) = a.train.outer_iterations {
                        ck.config.outer_iterations = k;
                    }
                    Runner::resume(ck, truth.as_ref(), exec)?
                }
                None => {
                    let cfg = a.train.resolve(TrainConfig::default())?;
                    Runner::new(&scaled, &mask, cfg, truth.as_ref(), None, exec)?
                }
            };
            let config = runner.checkpoint().config;
            while runner.completed() < config.outer_iterations {
                if let Err(e) = runner.step() {
                    // Keep what finished so far.
                    write_trace_jsonl(&trace_path, runner.trace())?;
                    return Err(e.into());
                }
                runner.checkpoint().save(&checkpoint_path)?;
                write_trace_jsonl(&trace_path, runner.trace())?;
                let rec = runner.trace().last().expect("step recorded");
                println!(
                    "iteration {}: L1 {:.4} -> {:.4}{}",
                    rec.iteration,
                    rec.l1_first_epoch,
                    rec.l1_last_epoch,
                    rec.train_rmse
                        .map(|r| format!(", RMSE {r:.4}"))
                        .unwrap_or_default()
                );
            }
            runner.checkpoint().save(&checkpoint_path)?;
            write_trace_jsonl(&trace_path, runner.trace())?;
            let imputed = runner.imputed().clone();
            let out = to_original_scale(imputed.values(), &scaler, &data, &mask)?;
            write_data_csv(&imputed_path, &out, None, &opts)?;
            summary.config = Some(&config);
            summary.completed_iterations = runner.completed();
            summary.final_rmse = final_rmse(&imputed)?;
            write_json(&a.out_dir.join("run.json"), &summary)?;
        }
    }
    println!("wrote {}", imputed_path.display());
    Ok(())
}

fn cmd_benchmark(a: BenchmarkArgs, exec: Execution) -> Result<(), CliError> {
    let opts = a.csv.options()?;
    let data = read_complete(&a.data, &opts)?;
    let mechanism = a.mechanism.mechanism();
    let train = a.train.resolve(protocol_config(mechanism))?;
    let bench = BenchmarkConfig {
        folds: a.folds,
        seed: a.split_seed,
        mechanism,
        methods: a.methods.iter().map(|&m| m.into()).collect(),
    };
    let report = kfold_benchmark(&data, &bench, &train, exec)?;
    create_dir(&a.out_dir)?;
    report.write_json(a.out_dir.join("report.json"))?;
    let table = report.to_table();
    std::fs::write(a.out_dir.join("report.txt"), &table)
        .map_err(|e| CliError::usage(format!("cannot write report.txt: {e}")))?;
    if a.csv_folds {
        report.write_fold_csv(a.out_dir.join("folds.csv"))?;
    }
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    rmse: f64,
    missing_cells: usize,
    scaled: bool,
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let opts = a.csv.options()?;
    let imputed = read_complete(&a.imputed, &opts)?;
    let truth = read_complete(&a.truth, &opts)?;
    let mask = read_mask_csv(&a.mask)?;
    let rmse = if a.raw {
        rmse_missing(&imputed, &truth, &mask)?
    } else {
        let scaler = fit_scaler(&truth, &mask)?;
        rmse_missing(&scaler.apply(&imputed)?, &scaler.apply(&truth)?, &mask)?
    };
    let out = EvalOutput {
        rmse,
        missing_cells: mask.missing_count(),
        scaled: !a.raw,
    };
    println!(
        "{}",
        serde_json::to_string(&out).map_err(|e| CliError::usage(e.to_string()))?
    );
    Ok(())
}
