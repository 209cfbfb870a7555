//! Bayesian optimization with the lower confidence bound.
//!
//! The acquisition ignores gradients; they reach the loop only through the
//! surrogate. Surrogates are fitted in unit-box coordinates with standardized
//! labels, so the acquisition search runs on `[0, 1]^D`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DerivativeDataset, Standardization, TestFunction};
use crate::error::{Error, Result};
use crate::exact_gp::ExactFitConfig;
use crate::linalg::Matrix;
use crate::models::{fit, FitOptions, Fitted, ModelKind, ModelSpec};
use crate::posterior::PosteriorMoments;
use crate::variational::TrainingConfig;

const RANDOM_STARTS: usize = 64;
const HISTORY_STARTS: usize = 5;
const DESCENT_STEPS: usize = 100;
const INITIAL_STEP: f64 = 0.05;
const FD_STEP: f64 = 1e-5;
const MIN_SEPARATION: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    /// Total evaluations, initial design included.
    pub budget: usize,
    pub init_count: usize,
    /// Points suggested per round (q).
    pub batch_size: usize,
    pub beta: f64,
    /// `num_inducing` is an upper bound; it is capped by the history size.
    pub surrogate: ModelSpec,
    /// Optimizer steps per refit (full batch).
    pub retrain_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl BoConfig {
    pub fn new(surrogate: ModelSpec) -> Self {
        Self {
            budget: 60,
            init_count: 10,
            batch_size: 1,
            beta: 2.0,
            surrogate,
            retrain_epochs: 300,
            learning_rate: 0.05,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.init_count == 0 || self.init_count > self.budget {
            return Err(Error::InvalidConfig(format!(
                "init count {} must be in 1..=budget ({})",
                self.init_count, self.budget
            )));
        }
        // init = budget is plain random search and needs no batch room
        let no_room =
            self.init_count < self.budget && self.init_count + self.batch_size > self.budget;
        if self.batch_size == 0 || no_room {
            return Err(Error::InvalidConfig(
                "init count + batch size exceeds budget".into(),
            ));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "beta = {} must be ≥ 0",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Something that can be evaluated inside a box.
pub trait Evaluator {
    fn bounds(&self) -> Vec<(f64, f64)>;
    /// Value and, when available, gradient.
    fn evaluate(&self, x: &[f64]) -> Result<(f64, Option<Vec<f64>>)>;
}

impl Evaluator for TestFunction {
    fn bounds(&self) -> Vec<(f64, f64)> {
        TestFunction::bounds(self)
    }

    fn evaluate(&self, x: &[f64]) -> Result<(f64, Option<Vec<f64>>)> {
        TestFunction::evaluate(self, x).map(|(y, g)| (y, Some(g)))
    }
}

/// Evaluations in raw coordinates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub gradients: Vec<Option<Vec<f64>>>,
    /// Running minimum of `values`.
    pub best_so_far: Vec<f64>,
    /// Points whose evaluation failed, with the error message.
    pub failures: Vec<(Vec<f64>, String)>,
    /// Gradient accesses made by surrogate fitting and prediction.
    pub gradient_reads: usize,
}

impl History {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64, dy: Option<Vec<f64>>) {
        let best = self.best_so_far.last().map_or(y, |&b| b.min(y));
        self.points.push(x);
        self.values.push(y);
        self.gradients.push(dy);
        self.best_so_far.push(best);
    }

    pub fn best(&self) -> Option<f64> {
        self.best_so_far.last().copied()
    }

    /// Evaluations so far, failures included.
    pub fn evaluations(&self) -> usize {
        self.points.len() + self.failures.len()
    }

    /// History read back from a raw-coordinate dataset.
    pub fn from_dataset(data: &DerivativeDataset) -> Self {
        let raw = data.destandardized();
        let mut h = History::default();
        for i in 0..raw.len() {
            let dy: Option<Vec<f64>> = (0..raw.dim()).map(|j| raw.partial(i, j)).collect();
            h.push(raw.x().row_slice(i).to_vec(), raw.y()[i], dy);
        }
        h
    }

    /// Raw-coordinate dataset; points without gradients have masked partials.
    pub fn to_dataset(&self, dim: usize) -> Result<DerivativeDataset> {
        let n = self.len();
        let x = Matrix::from_fn(n, dim, |i, j| self.points[i][j]);
        let any_dy = self.gradients.iter().any(Option::is_some);
        let dy = any_dy.then(|| {
            Matrix::from_fn(n, dim, |i, j| {
                self.gradients[i].as_ref().map_or(0.0, |g| g[j])
            })
        });
        let mask = any_dy.then(|| {
            (0..n)
                .flat_map(|i| std::iter::repeat_n(self.gradients[i].is_some(), dim))
                .collect()
        });
        DerivativeDataset::new(
            x,
            self.values.clone(),
            dy,
            mask,
            Standardization::identity(dim),
        )
    }

    /// Writes one row per evaluation (`eval, x…, y, best, dy…`) atomically.
    pub fn write_trace(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dim = self.points.first().map_or(0, Vec::len);
        let tmp = path.with_extension("csv.tmp");
        {
            let mut w = csv::Writer::from_path(&tmp).map_err(csv_error)?;
            let mut header = vec!["eval".to_string()];
            header.extend((1..=dim).map(|j| format!("x{j}")));
            header.extend(["y".into(), "best_so_far".into()]);
            header.extend((1..=dim).map(|j| format!("dy{j}")));
            w.write_record(&header).map_err(csv_error)?;
            for i in 0..self.len() {
                let mut row = vec![(i + 1).to_string()];
                row.extend(self.points[i].iter().map(|v| format!("{v:.17e}")));
                row.push(format!("{:.17e}", self.values[i]));
                row.push(format!("{:.17e}", self.best_so_far[i]));
                match &self.gradients[i] {
                    Some(g) => row.extend(g.iter().map(|v| format!("{v:.17e}"))),
                    None => row.extend(std::iter::repeat_n(String::new(), dim)),
                }
                w.write_record(&row).map_err(csv_error)?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// `mean − β·√var` per query, on the latent variance.
pub fn lcb(moments: &PosteriorMoments, beta: f64) -> Vec<f64> {
    moments
        .mean
        .iter()
        .zip(&moments.var_f)
        .map(|(m, v)| m - beta * v.max(0.0).sqrt())
        .collect()
}

fn acquisition(surrogate: &Fitted, points: &[Vec<f64>], beta: f64) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let d = points[0].len();
    let q = Matrix::from_fn(points.len(), d, |i, j| points[i][j]);
    Ok(lcb(&surrogate.predict(&q, false)?, beta))
}

fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| rng.random::<f64>()).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Minimizes the LCB over `[0, 1]^D` from random starts plus `incumbents`,
/// returning `q` distinct points.
///
/// Each start takes normalized steps along a central-difference gradient,
/// projected to the box. A step that does not lower the acquisition is
/// rejected and the step length halved, so every start descends monotonically.
pub fn suggest(
    surrogate: &Fitted,
    dim: usize,
    incumbents: &[Vec<f64>],
    q: usize,
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut x: Vec<Vec<f64>> = (0..RANDOM_STARTS).map(|_| random_unit(dim, rng)).collect();
    x.extend(
        incumbents
            .iter()
            .map(|u| u.iter().map(|v| v.clamp(0.0, 1.0)).collect()),
    );
    let mut val = acquisition(surrogate, &x, beta)?;
    let mut step = vec![INITIAL_STEP; x.len()];
    for _ in 0..DESCENT_STEPS {
        let mut probes = Vec::with_capacity(x.len() * 2 * dim);
        for u in &x {
            for j in 0..dim {
                let mut hi = u.clone();
                let mut lo = u.clone();
                hi[j] = (u[j] + FD_STEP).min(1.0);
                lo[j] = (u[j] - FD_STEP).max(0.0);
                probes.push(hi);
                probes.push(lo);
            }
        }
        let pv = acquisition(surrogate, &probes, beta)?;
        let mut trial = x.clone();
        for (s, u) in x.iter().enumerate() {
            let g: Vec<f64> = (0..dim)
                .map(|j| {
                    let k = (s * dim + j) * 2;
                    let width = probes[k][j] - probes[k + 1][j];
                    if width > 0.0 {
                        (pv[k] - pv[k + 1]) / width
                    } else {
                        0.0
                    }
                })
                .collect();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                for j in 0..dim {
                    trial[s][j] = (u[j] - step[s] * g[j] / norm).clamp(0.0, 1.0);
                }
            }
        }
        let tv = acquisition(surrogate, &trial, beta)?;
        for s in 0..x.len() {
            if tv[s] < val[s] {
                x[s] = std::mem::take(&mut trial[s]);
                val[s] = tv[s];
            } else {
                step[s] *= 0.5;
            }
        }
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| val[a].total_cmp(&val[b]));
    let mut chosen: Vec<Vec<f64>> = Vec::with_capacity(q);
    for s in order {
        if chosen.len() == q {
            break;
        }
        if val[s].is_finite() && chosen.iter().all(|c| distance(c, &x[s]) >= MIN_SEPARATION) {
            chosen.push(x[s].clone());
        }
    }
    while chosen.len() < q {
        let u = random_unit(dim, rng);
        if chosen.iter().all(|c| distance(c, &u) >= MIN_SEPARATION) {
            chosen.push(u);
        }
    }
    Ok(chosen)
}

fn to_raw(u: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    u.iter()
        .zip(bounds)
        .map(|(v, (lo, hi))| lo + v * (hi - lo))
        .collect()
}

fn to_unit(x: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    x.iter()
        .zip(bounds)
        .map(|(v, (lo, hi))| (v - lo) / (hi - lo))
        .collect()
}

fn round_rng(seed: u64, round: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round as u64 + 1);
    rng
}

/// Fits the configured surrogate to `history` and records its gradient reads.
pub fn fit_surrogate(
    history: &mut History,
    bounds: &[(f64, f64)],
    config: &BoConfig,
    round: usize,
) -> Result<Fitted> {
    let d = bounds.len();
    let data = history.to_dataset(d)?.standardize(Some(bounds))?;
    let mut spec = config.surrogate;
    spec.num_inducing = spec.num_inducing.min(data.len());
    let rows = data.len() * (1 + d);
    let opts = FitOptions {
        training: TrainingConfig {
            batch_size: rows,
            epochs: config.retrain_epochs,
            learning_rate: config.learning_rate,
            seed: config.seed.wrapping_add(round as u64),
            ..TrainingConfig::default()
        },
        exact: ExactFitConfig {
            iterations: config.retrain_epochs,
            learning_rate: config.learning_rate,
            ..ExactFitConfig::default()
        },
        init_theta: None,
    };
    let before = data.gradient_reads();
    let fitted = fit(&spec, &data, &opts);
    history.gradient_reads += data.gradient_reads() - before;
    fitted
}

/// The next `q` raw-coordinate points to evaluate: the rest of the initial
/// design while the history is short, LCB minimizers afterwards.
pub fn ask(
    history: &mut History,
    bounds: &[(f64, f64)],
    config: &BoConfig,
    round: usize,
) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let d = bounds.len();
    let mut rng = round_rng(config.seed, round);
    if history.len() < config.init_count {
        let n = config.init_count - history.len();
        return Ok((0..n)
            .map(|_| to_raw(&random_unit(d, &mut rng), bounds))
            .collect());
    }
    let surrogate = fit_surrogate(history, bounds, config, round)?;
    let mut ranked: Vec<usize> = (0..history.len()).collect();
    ranked.sort_by(|&a, &b| history.values[a].total_cmp(&history.values[b]));
    let incumbents: Vec<Vec<f64>> = ranked
        .iter()
        .take(HISTORY_STARTS)
        .map(|&i| to_unit(&history.points[i], bounds))
        .collect();
    let u = suggest(
        &surrogate,
        d,
        &incumbents,
        config.batch_size,
        config.beta,
        &mut rng,
    )?;
    Ok(u.iter().map(|p| to_raw(p, bounds)).collect())
}

fn evaluate_into(history: &mut History, f: &dyn Evaluator, x: Vec<f64>) {
    match f.evaluate(&x) {
        Ok((y, dy)) if y.is_finite() => history.push(x, y, dy),
        Ok((y, _)) => history.failures.push((x, format!("non-finite value {y}"))),
        Err(e) => {
            log::warn!("evaluation failed: {e}");
            history.failures.push((x, e.to_string()));
        }
    }
}

/// Initial random design, then rounds of refit, suggest and evaluate until the
/// budget is spent. With `trace` set, the history is rewritten after every round.
pub fn run_bo(config: &BoConfig, f: &dyn Evaluator, trace: Option<&Path>) -> Result<History> {
    config.validate()?;
    let bounds = f.bounds();
    let mut history = History::default();
    let mut round = 0;
    while history.evaluations() < config.budget {
        let remaining = config.budget - history.evaluations();
        let mut points = if history.len() < config.init_count {
            let mut rng = round_rng(config.seed, round);
            let n = (config.init_count - history.len()).min(remaining);
            (0..n)
                .map(|_| to_raw(&random_unit(bounds.len(), &mut rng), &bounds))
                .collect()
        } else {
            match ask(&mut history, &bounds, config, round) {
                Ok(p) => p,
                Err(e) if e.is_numerical() => {
                    log::warn!("round {round}: surrogate fit failed ({e}); sampling at random");
                    let mut rng = round_rng(config.seed, round);
                    (0..config.batch_size)
                        .map(|_| to_raw(&random_unit(bounds.len(), &mut rng), &bounds))
                        .collect()
                }
                Err(e) => return Err(e),
            }
        };
        points.truncate(remaining);
        for x in points {
            evaluate_into(&mut history, f, x);
        }
        if let Some(path) = trace {
            history.write_trace(path)?;
        }
        log::debug!(
            "round {round}: {} evaluations, best {:?}",
            history.evaluations(),
            history.best()
        );
        round += 1;
    }
    Ok(history)
}

/// Pure random search with the same seeding as the initial design.
pub fn random_search(f: &dyn Evaluator, budget: usize, seed: u64) -> Result<History> {
    let spec = ModelSpec::new(ModelKind::Exact, 1, None, f.bounds().len())?;
    let config = BoConfig {
        budget,
        init_count: budget,
        seed,
        ..BoConfig::new(spec)
    };
    run_bo(&config, f, None)
}

#[cfg(test)]
mod tests;
