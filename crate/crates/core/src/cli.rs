//! Command-line surface: dataset generation, training, sweeps, checks and BO.
//!
//! Every command writes flat CSV plus a JSON manifest. Exit codes: 0 success,
//! 1 usage or input error, 2 numerical failure, 3 failed check.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bo::{self, BoConfig, History};
use crate::data::{load_csv, sample_raw, save_csv, DerivativeDataset, TestFunction};
use crate::diagnostics::{self, HessFn};
use crate::error::{Error, Result};
use crate::kernels::hess_k;
use crate::models::{fit, FitOptions, Fitted, ModelKind, ModelSpec};
use crate::variational::{Checkpoint, TrainingConfig, CHECKPOINT_VERSION};

/// Worker threads for `sweep`.
pub const THREADS_ENV: &str = "DIRGP_THREADS";
pub const METRICS_HEADER: [&str; 8] = [
    "model",
    "M",
    "p",
    "size",
    "nll",
    "rmse",
    "wall_time_s",
    "seed",
];

#[derive(Parser, Debug)]
#[command(
    name = "dirgp",
    version,
    about = "GP regression with derivative observations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample train/test CSVs from a test function.
    Gen(GenArgs),
    /// Train one model and report test metrics.
    Train(TrainArgs),
    /// Train models across inducing-matrix sizes.
    Sweep(SweepArgs),
    /// Run the property suites.
    Check(CheckArgs),
    /// Bayesian optimization of a test function.
    Bo(BoArgs),
    /// Suggest points for an external objective (ask/tell mode).
    Ask(AskArgs),
    /// Append external observations to a history CSV.
    Tell(TellArgs),
    /// M=500/p=1 against M=1000/p=0 on labels only.
    Compare(CompareArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GenArgs {
    #[arg(long = "fn")]
    pub function: String,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Test points; defaults to `n`.
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub noise_y: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise_g: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Training knobs shared by train, sweep and compare.
#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainKnobs {
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 500)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optimizer iterations for exact models.
    #[arg(long, default_value_t = 200)]
    pub exact_iters: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value_t = 100)]
    pub m: usize,
    #[arg(long)]
    pub p: Option<usize>,
    #[command(flatten)]
    pub knobs: TrainKnobs,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Inducing-matrix sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [100usize, 200, 400])]
    pub sizes: Vec<usize>,
    /// Model tokens such as `svgp`, `dsvgp2`, `gradppgpr`.
    #[arg(long, value_delimiter = ',', default_values_t = ["svgp".to_string(), "dsvgp2".to_string()])]
    pub models: Vec<String>,
    #[command(flatten)]
    pub knobs: TrainKnobs,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Flip the sign of the kernel Hessian to confirm the suite fails.
    #[arg(long)]
    pub mutate_hess_sign: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Surrogate and acquisition settings shared by bo and ask.
#[derive(Args, Debug, Clone, Serialize)]
pub struct BoKnobs {
    /// Surrogate token (`dppgpr1`, `svgp`, `exact`, ...) or `random`.
    #[arg(long, default_value = "dppgpr1")]
    pub surrogate: String,
    #[arg(long, default_value_t = 50)]
    pub m: usize,
    #[arg(long, default_value_t = 120)]
    pub budget: usize,
    #[arg(long, default_value_t = 20)]
    pub init: usize,
    #[arg(long, default_value_t = 1)]
    pub q: usize,
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct BoArgs {
    #[arg(long = "fn", default_value = "branin")]
    pub function: String,
    #[command(flatten)]
    pub knobs: BoKnobs,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct AskArgs {
    /// History CSV (`x1..xD, y[, dy1..dyD]`); may not exist yet.
    #[arg(long)]
    pub history: PathBuf,
    /// Box as `lo:hi` per dimension, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub bounds: String,
    #[command(flatten)]
    pub knobs: BoKnobs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where the suggested points go.
    #[arg(long)]
    pub suggest: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TellArgs {
    #[arg(long)]
    pub history: PathBuf,
    /// Evaluated points in the history format.
    #[arg(long)]
    pub observations: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CompareArgs {
    /// Single CSV split 80/20, or use --train/--test.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub m_directional: usize,
    #[command(flatten)]
    pub knobs: TrainKnobs,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// What a command did, written atomically when it finishes.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub code_version: String,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn write(
        dir: &Path,
        command: &str,
        config: &impl Serialize,
        seed: Option<u64>,
        started: Instant,
        outputs: &[PathBuf],
    ) -> Result<PathBuf> {
        let m = RunManifest {
            command: command.into(),
            config: serde_json::to_value(config)?,
            seed,
            code_version: env!("CARGO_PKG_VERSION").into(),
            wall_time_s: started.elapsed().as_secs_f64(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        let path = dir.join(format!("{command}_manifest.json"));
        write_atomic(&path, &serde_json::to_vec_pretty(&m)?)?;
        Ok(path)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// One metrics-CSV row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub model: String,
    pub m: usize,
    pub p: usize,
    pub size: usize,
    pub nll: f64,
    pub rmse: f64,
    pub wall_time_s: f64,
    pub seed: u64,
}

impl MetricsRow {
    fn cells(&self) -> Vec<String> {
        vec![
            self.model.clone(),
            self.m.to_string(),
            self.p.to_string(),
            self.size.to_string(),
            format!("{:.10e}", self.nll),
            format!("{:.10e}", self.rmse),
            format!("{:.3}", self.wall_time_s),
            self.seed.to_string(),
        ]
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.cells()).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    write_atomic(path, &bytes)
}

fn display_token(spec: &ModelSpec) -> String {
    if spec.kind.takes_p() {
        format!("{}{}", spec.kind.name(), spec.p)
    } else {
        spec.kind.name().to_string()
    }
}

/// Training data standardized on itself; test data in the same coordinates.
fn load_pair(train: &Path, test: &Path) -> Result<(DerivativeDataset, DerivativeDataset)> {
    let train = load_csv(train)?.standardize(None)?;
    let test = load_csv(test)?.restandardized(train.standardization())?;
    if test.dim() != train.dim() {
        return Err(Error::dims("load", "train and test dimensions differ"));
    }
    Ok((train, test))
}

fn fit_options(k: &TrainKnobs, seed: u64) -> FitOptions {
    let mut o = FitOptions {
        training: TrainingConfig {
            batch_size: k.batch_size,
            epochs: k.epochs,
            learning_rate: k.lr,
            seed,
            ..TrainingConfig::default()
        },
        ..FitOptions::default()
    };
    o.exact.iterations = k.exact_iters;
    o
}

/// Trains one model and measures it on `test`.
pub fn train_and_score(
    spec: &ModelSpec,
    train: &DerivativeDataset,
    test: &DerivativeDataset,
    knobs: &TrainKnobs,
    seed: u64,
) -> Result<(Fitted, MetricsRow)> {
    let started = Instant::now();
    let fitted = fit(spec, train, &fit_options(knobs, seed))?;
    let metrics = fitted.metrics(test)?;
    let (m, p, size) = match &fitted {
        Fitted::Exact(e) => (train.len(), spec.p, e.num_rows()),
        Fitted::Variational { .. } => (spec.num_inducing, spec.p, spec.matrix_size()),
    };
    let row = MetricsRow {
        model: display_token(spec),
        m,
        p,
        size,
        nll: metrics.nll,
        rmse: metrics.rmse,
        wall_time_s: started.elapsed().as_secs_f64(),
        seed,
    };
    Ok((fitted, row))
}

pub fn cmd_gen(a: &GenArgs) -> Result<Vec<PathBuf>> {
    let started = Instant::now();
    let f = TestFunction::from_name(&a.function)?;
    std::fs::create_dir_all(&a.out)?;
    let train = sample_raw(f, a.n, a.noise_y, a.noise_g, a.seed)?;
    let test = sample_raw(
        f,
        a.n_test.unwrap_or(a.n),
        a.noise_y,
        a.noise_g,
        a.seed.wrapping_add(1_000_003),
    )?;
    let paths = [
        a.out.join(format!("{}_train.csv", f.name())),
        a.out.join(format!("{}_test.csv", f.name())),
    ];
    save_csv(&train, &paths[0])?;
    save_csv(&test, &paths[1])?;
    RunManifest::write(&a.out, "gen", a, Some(a.seed), started, &paths)?;
    Ok(paths.to_vec())
}

pub fn cmd_train(a: &TrainArgs) -> Result<MetricsRow> {
    let started = Instant::now();
    let (train, test) = load_pair(&a.train, &a.test)?;
    let (kind, suffix) = ModelKind::parse_token(&a.model)?;
    let p = match (suffix, a.p) {
        (Some(s), Some(p)) if s != p => {
            return Err(Error::InvalidConfig(format!(
                "`{}` conflicts with --p {p}",
                a.model
            )))
        }
        (s, p) => p.or(s),
    };
    let spec = ModelSpec::new(kind, a.m, p, train.dim())?;
    let (fitted, row) = train_and_score(&spec, &train, &test, &a.knobs, a.knobs.seed)?;
    std::fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("checkpoint.json");
    match fitted {
        Fitted::Variational { state, theta, .. } => {
            let config = spec.training_config(&fit_options(&a.knobs, a.knobs.seed).training);
            Checkpoint {
                format_version: CHECKPOINT_VERSION,
                model: row.model.clone(),
                config,
                theta,
                state,
                standardization: train.standardization().clone(),
            }
            .save(&ckpt)?;
        }
        Fitted::Exact(m) => {
            let body = serde_json::json!({
                "format_version": CHECKPOINT_VERSION,
                "model": row.model,
                "theta": m.theta(),
                "standardization": train.standardization(),
                "train": a.train.display().to_string(),
            });
            write_atomic(&ckpt, &serde_json::to_vec_pretty(&body)?)?;
        }
    }
    let metrics = a.out.join("metrics.csv");
    write_metrics(&metrics, std::slice::from_ref(&row))?;
    RunManifest::write(
        &a.out,
        "train",
        a,
        Some(a.knobs.seed),
        started,
        &[ckpt, metrics],
    )?;
    Ok(row)
}

/// `(spec, seed)` for every size × model, with `M = size / (p + 1)`.
pub fn sweep_plan(
    sizes: &[usize],
    models: &[String],
    dim: usize,
    seed: u64,
) -> Result<Vec<(ModelSpec, u64)>> {
    let mut plan = Vec::new();
    for &size in sizes {
        for token in models {
            let (kind, p) = ModelKind::parse_token(token)?;
            if kind.is_exact() {
                return Err(Error::InvalidConfig(format!(
                    "{token} has no inducing budget to sweep"
                )));
            }
            let probe = ModelSpec::new(kind, 1, p, dim)?;
            let m = size / (probe.p + 1);
            let spec = ModelSpec::new(kind, m, p, dim)?;
            plan.push((spec, seed.wrapping_add(plan.len() as u64)));
        }
    }
    Ok(plan)
}

fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs `jobs` on up to `threads` workers, keeping input order.
fn run_parallel<T: Send>(
    jobs: usize,
    threads: usize,
    work: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..jobs).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.min(jobs).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs {
                    break;
                }
                let r = work(i);
                out.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<Vec<MetricsRow>> {
    let started = Instant::now();
    let (train, test) = load_pair(&a.train, &a.test)?;
    let plan = sweep_plan(&a.sizes, &a.models, train.dim(), a.knobs.seed)?;
    let rows = run_parallel(plan.len(), thread_count(), |i| {
        let (spec, seed) = &plan[i];
        log::info!(
            "sweep {}/{}: {} M={}",
            i + 1,
            plan.len(),
            display_token(spec),
            spec.num_inducing
        );
        let (_, mut row) = train_and_score(spec, &train, &test, &a.knobs, *seed)?;
        row.size = spec.matrix_size();
        Ok(row)
    })?;
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("sweep.csv");
    write_metrics(&path, &rows)?;
    RunManifest::write(&a.out, "sweep", a, Some(a.knobs.seed), started, &[path])?;
    Ok(rows)
}

pub fn cmd_check(a: &CheckArgs) -> Result<Vec<diagnostics::CheckResult>> {
    let hess: HessFn = if a.mutate_hess_sign {
        diagnostics::mutated_hess_k
    } else {
        hess_k
    };
    let report = diagnostics::run_all(hess, a.seed)?;
    if let Some(path) = &a.report {
        write_atomic(path, &serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(report)
}

fn bo_config(k: &BoKnobs, dim: usize, seed: u64) -> Result<Option<BoConfig>> {
    if k.surrogate == "random" {
        return Ok(None);
    }
    let (kind, p) = ModelKind::parse_token(&k.surrogate)?;
    let config = BoConfig {
        budget: k.budget,
        init_count: k.init,
        batch_size: k.q,
        beta: k.beta,
        surrogate: ModelSpec::new(kind, k.m, p, dim)?,
        retrain_epochs: k.epochs,
        learning_rate: k.lr,
        seed,
    };
    config.validate()?;
    Ok(Some(config))
}

/// Per-evaluation median of the best-so-far curves.
pub fn median_curve(histories: &[History]) -> Vec<f64> {
    let len = histories
        .iter()
        .map(|h| h.best_so_far.len())
        .min()
        .unwrap_or(0);
    (0..len)
        .map(|i| {
            let mut v: Vec<f64> = histories.iter().map(|h| h.best_so_far[i]).collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        })
        .collect()
}

pub fn cmd_bo(a: &BoArgs) -> Result<Vec<History>> {
    let started = Instant::now();
    let f = TestFunction::from_name(&a.function)?;
    std::fs::create_dir_all(&a.out)?;
    let mut outputs = Vec::new();
    let mut histories = Vec::new();
    for &seed in &a.seeds {
        let path = a.out.join(format!("trace_seed{seed}.csv"));
        let h = match bo_config(&a.knobs, f.dim(), seed)? {
            Some(c) => bo::run_bo(&c, &f, Some(&path))?,
            None => {
                let h = bo::random_search(&f, a.knobs.budget, seed)?;
                h.write_trace(&path)?;
                h
            }
        };
        log::info!("seed {seed}: best {:?}", h.best());
        outputs.push(path);
        histories.push(h);
    }
    let median = a.out.join("median_best.csv");
    let mut text = String::from("eval,median_best_so_far\n");
    for (i, v) in median_curve(&histories).iter().enumerate() {
        text.push_str(&format!("{},{v:.17e}\n", i + 1));
    }
    write_atomic(&median, text.as_bytes())?;
    outputs.push(median);
    RunManifest::write(&a.out, "bo", a, a.seeds.first().copied(), started, &outputs)?;
    Ok(histories)
}

pub fn parse_bounds(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(',')
        .map(|part| {
            let (lo, hi) = part
                .split_once(':')
                .ok_or_else(|| Error::InvalidConfig(format!("bound `{part}` is not lo:hi")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidConfig(format!("bad bound `{part}`")))
            };
            let (lo, hi) = (parse(lo)?, parse(hi)?);
            if !(lo < hi) {
                return Err(Error::InvalidConfig(format!("empty interval `{part}`")));
            }
            Ok((lo, hi))
        })
        .collect()
}

fn read_history(path: &Path) -> Result<History> {
    if path.exists() {
        Ok(History::from_dataset(&load_csv(path)?))
    } else {
        Ok(History::default())
    }
}

pub fn cmd_ask(a: &AskArgs) -> Result<Vec<Vec<f64>>> {
    let bounds = parse_bounds(&a.bounds)?;
    let mut history = read_history(&a.history)?;
    if let Some(p) = history.points.first() {
        if p.len() != bounds.len() {
            return Err(Error::dims("ask", "history and bounds dimensions differ"));
        }
    }
    let round = history.len();
    let points = match bo_config(&a.knobs, bounds.len(), a.seed)? {
        Some(c) => bo::ask(&mut history, &bounds, &c, round)?,
        None => {
            // random search: the initial design never ends
            let n = history.len() + a.knobs.q;
            let c = BoConfig {
                init_count: n,
                budget: n,
                seed: a.seed,
                ..BoConfig::new(ModelSpec::new(ModelKind::Exact, 1, None, bounds.len())?)
            };
            bo::ask(&mut history, &bounds, &c, round)?
        }
    };
    let mut text: String = (1..=bounds.len())
        .map(|j| format!("x{j}"))
        .collect::<Vec<_>>()
        .join(",");
    text.push('\n');
    for p in &points {
        let cells: Vec<String> = p.iter().map(|v| format!("{v:.17e}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    write_atomic(&a.suggest, text.as_bytes())?;
    Ok(points)
}

pub fn cmd_tell(a: &TellArgs) -> Result<usize> {
    let mut history = read_history(&a.history)?;
    let new = History::from_dataset(&load_csv(&a.observations)?);
    for i in 0..new.len() {
        history.push(
            new.points[i].clone(),
            new.values[i],
            new.gradients[i].clone(),
        );
    }
    let dim = history.points[0].len();
    let data = history.to_dataset(dim)?;
    let mut tmp = a.history.as_os_str().to_owned();
    tmp.push(".tmp");
    save_csv(&data, &tmp)?;
    std::fs::rename(&tmp, &a.history)?;
    Ok(history.len())
}

/// Deterministic 80/20 split (every fifth row to the test set).
fn split(data: &DerivativeDataset) -> Result<(DerivativeDataset, DerivativeDataset)> {
    let (train, test): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|i| i % 5 != 4);
    Ok((data.subset(&train)?, data.subset(&test)?))
}

pub fn cmd_compare(a: &CompareArgs) -> Result<Vec<MetricsRow>> {
    let started = Instant::now();
    let (train, test) = match (&a.data, &a.train, &a.test) {
        (Some(d), None, None) => {
            let all = load_csv(d)?;
            let (tr, te) = split(&all)?;
            let tr = tr.standardize(None)?;
            let te = te.restandardized(tr.standardization())?;
            (tr, te)
        }
        (None, Some(tr), Some(te)) => load_pair(tr, te)?,
        _ => {
            return Err(Error::InvalidConfig(
                "give either --data or both --train and --test".into(),
            ))
        }
    };
    // labels only: the directional models learn directions without gradient data
    let (train, test) = (train.without_derivatives(), test.without_derivatives());
    let d = train.dim();
    let md = a.m_directional;
    let specs = [
        ModelSpec::new(ModelKind::Dsvgp, md, Some(1), d)?,
        ModelSpec::new(ModelKind::Svgp, 2 * md, None, d)?,
        ModelSpec::new(ModelKind::Dppgpr, md, Some(1), d)?,
        ModelSpec::new(ModelKind::Ppgpr, 2 * md, None, d)?,
    ];
    let rows = specs
        .iter()
        .map(|s| train_and_score(s, &train, &test, &a.knobs, a.knobs.seed).map(|(_, r)| r))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("compare.csv");
    write_metrics(&path, &rows)?;
    RunManifest::write(&a.out, "compare", a, Some(a.knobs.seed), started, &[path])?;
    Ok(rows)
}

fn print_rows(rows: &[MetricsRow]) {
    println!("{}", METRICS_HEADER.join(","));
    for r in rows {
        println!("{}", r.cells().join(","));
    }
}

fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a).map(|paths| {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }),
        Command::Train(a) => cmd_train(a).map(|r| {
            print_rows(&[r]);
            0
        }),
        Command::Sweep(a) => cmd_sweep(a).map(|rows| {
            print_rows(&rows);
            0
        }),
        Command::Compare(a) => cmd_compare(a).map(|rows| {
            print_rows(&rows);
            0
        }),
        Command::Check(a) => cmd_check(a).map(|report| {
            for c in &report {
                println!("{c}");
            }
            if report.iter().all(|c| c.passed) {
                0
            } else {
                3
            }
        }),
        Command::Bo(a) => cmd_bo(a).map(|hs| {
            for (seed, h) in a.seeds.iter().zip(&hs) {
                println!("seed {seed}: best {:.6}", h.best().unwrap_or(f64::NAN));
            }
            0
        }),
        Command::Ask(a) => cmd_ask(a).map(|pts| {
            println!("{} point(s) written to {}", pts.len(), a.suggest.display());
            0
        }),
        Command::Tell(a) => cmd_tell(a).map(|n| {
            println!("history now holds {n} evaluations");
            0
        }),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}
