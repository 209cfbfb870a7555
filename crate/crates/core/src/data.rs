//! Synthetic test functions with analytic gradients, derivative datasets,
//! standardization, CSV I/O and active-subspace projection.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{ObsKind, Observation};
use crate::linalg::{symmetric_eigen, Matrix};

use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestFunction {
    Branin,
    SixHumpCamel,
    StyblinskiTang,
    Hartmann6,
    Sin5,
}

const HARTMANN_ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];
const HARTMANN_A: [[f64; 6]; 4] = [
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
];
const HARTMANN_P: [[f64; 6]; 4] = [
    [0.1312, 0.1696, 0.5569, 0.0124, 0.8283, 0.5886],
    [0.2329, 0.4135, 0.8307, 0.3736, 0.1004, 0.9991],
    [0.2348, 0.1451, 0.3522, 0.2883, 0.3047, 0.6650],
    [0.4047, 0.8828, 0.8732, 0.5743, 0.1091, 0.0381],
];

/// Global minimum of Branin.
pub const BRANIN_MIN: f64 = 0.397_887_357_729_738_1;

impl TestFunction {
    pub const ALL: [TestFunction; 5] = [
        TestFunction::Branin,
        TestFunction::SixHumpCamel,
        TestFunction::StyblinskiTang,
        TestFunction::Hartmann6,
        TestFunction::Sin5,
    ];

    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "branin" => Ok(TestFunction::Branin),
            "sixhumpcamel" | "camel" => Ok(TestFunction::SixHumpCamel),
            "styblinskitang" | "styblinski" => Ok(TestFunction::StyblinskiTang),
            "hartmann6" | "hartmann" => Ok(TestFunction::Hartmann6),
            "sin5" => Ok(TestFunction::Sin5),
            _ => Err(Error::UnknownFunction(name.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TestFunction::Branin => "branin",
            TestFunction::SixHumpCamel => "sixhumpcamel",
            TestFunction::StyblinskiTang => "styblinskitang",
            TestFunction::Hartmann6 => "hartmann6",
            TestFunction::Sin5 => "sin5",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TestFunction::Hartmann6 => 6,
            TestFunction::Sin5 => 5,
            _ => 2,
        }
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        match self {
            TestFunction::Branin => vec![(-5.0, 10.0), (0.0, 15.0)],
            TestFunction::SixHumpCamel => vec![(-3.0, 3.0), (-2.0, 2.0)],
            TestFunction::StyblinskiTang => vec![(-5.0, 5.0); 2],
            TestFunction::Hartmann6 => vec![(0.0, 1.0); 6],
            TestFunction::Sin5 => vec![(-1.0, 1.0); 5],
        }
    }

    /// Value and gradient at `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        if x.len() != self.dim() {
            return Err(Error::dims(
                "evaluate",
                format!(
                    "{} takes {} inputs, got {}",
                    self.name(),
                    self.dim(),
                    x.len()
                ),
            ));
        }
        for (&xi, (lo, hi)) in x.iter().zip(self.bounds()) {
            let slack = 1e-12 * (hi - lo);
            if !(xi >= lo - slack && xi <= hi + slack) {
                return Err(Error::OutOfBox {
                    function: self.name().to_string(),
                });
            }
        }
        Ok(self.eval_unchecked(x))
    }

    fn eval_unchecked(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self {
            TestFunction::Branin => {
                let (a, b, c, r, s, t) = (
                    1.0,
                    5.1 / (4.0 * PI * PI),
                    5.0 / PI,
                    6.0,
                    10.0,
                    1.0 / (8.0 * PI),
                );
                let inner = x[1] - b * x[0] * x[0] + c * x[0] - r;
                let f = a * inner * inner + s * (1.0 - t) * x[0].cos() + s;
                let g0 = 2.0 * a * inner * (-2.0 * b * x[0] + c) - s * (1.0 - t) * x[0].sin();
                let g1 = 2.0 * a * inner;
                (f, vec![g0, g1])
            }
            TestFunction::SixHumpCamel => {
                let (u, v) = (x[0], x[1]);
                let f = (4.0 - 2.1 * u * u + u.powi(4) / 3.0) * u * u
                    + u * v
                    + (-4.0 + 4.0 * v * v) * v * v;
                let g0 = 8.0 * u - 8.4 * u.powi(3) + 2.0 * u.powi(5) + v;
                let g1 = u - 8.0 * v + 16.0 * v.powi(3);
                (f, vec![g0, g1])
            }
            TestFunction::StyblinskiTang => {
                let f = 0.5
                    * x.iter()
                        .map(|v| v.powi(4) - 16.0 * v * v + 5.0 * v)
                        .sum::<f64>();
                let g = x
                    .iter()
                    .map(|v| 0.5 * (4.0 * v.powi(3) - 32.0 * v + 5.0))
                    .collect();
                (f, g)
            }
            TestFunction::Hartmann6 => {
                let mut f = 0.0;
                let mut g = vec![0.0; 6];
                for i in 0..4 {
                    let e: f64 = (0..6)
                        .map(|j| HARTMANN_A[i][j] * (x[j] - HARTMANN_P[i][j]).powi(2))
                        .sum();
                    let term = HARTMANN_ALPHA[i] * (-e).exp();
                    f -= term;
                    for j in 0..6 {
                        g[j] += term * 2.0 * HARTMANN_A[i][j] * (x[j] - HARTMANN_P[i][j]);
                    }
                }
                (f, g)
            }
            TestFunction::Sin5 => {
                let sq: f64 = x.iter().map(|v| v * v).sum();
                let arg = 2.0 * PI * sq;
                let c = 4.0 * PI * arg.cos();
                (arg.sin(), x.iter().map(|v| c * v).collect())
            }
        }
    }
}

/// Affine maps between raw and stored coordinates:
/// `x_std = (x − x_shift) / x_scale`, `y_std = (y − y_shift) / y_scale`,
/// `∂y_std/∂x_std_j = ∂y/∂x_j · x_scale_j / y_scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub y_shift: f64,
    pub y_scale: f64,
    pub x_shift: Vec<f64>,
    pub x_scale: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Self {
            y_shift: 0.0,
            y_scale: 1.0,
            x_shift: vec![0.0; dim],
            x_scale: vec![1.0; dim],
        }
    }

    /// Unit-box inputs (from `bounds`, or the data range when absent) and
    /// zero-mean unit-variance labels.
    pub fn fit(x: &Matrix, y: &[f64], bounds: Option<&[(f64, f64)]>) -> Self {
        let d = x.cols();
        let (x_shift, x_scale) = match bounds {
            Some(b) => b.iter().map(|(lo, hi)| (*lo, hi - lo)).unzip(),
            None => (0..d)
                .map(|j| {
                    let col = x.column_vec(j);
                    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    if hi > lo {
                        (lo, hi - lo)
                    } else if lo.is_finite() {
                        (lo, 1.0)
                    } else {
                        (0.0, 1.0)
                    }
                })
                .unzip(),
        };
        let n = y.len().max(1) as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        Self {
            y_shift: mean,
            y_scale: if sd > 0.0 { sd } else { 1.0 },
            x_shift,
            x_scale,
        }
    }

    pub fn x_to_std(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.x_shift.iter().zip(&self.x_scale))
            .map(|(v, (s, c))| (v - s) / c)
            .collect()
    }

    pub fn x_to_raw(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.x_shift.iter().zip(&self.x_scale))
            .map(|(v, (s, c))| v * c + s)
            .collect()
    }

    pub fn y_to_std(&self, y: f64) -> f64 {
        (y - self.y_shift) / self.y_scale
    }

    pub fn y_to_raw(&self, y: f64) -> f64 {
        y * self.y_scale + self.y_shift
    }

    pub fn dy_to_std(&self, j: usize, g: f64) -> f64 {
        g * self.x_scale[j] / self.y_scale
    }

    pub fn dy_to_raw(&self, j: usize, g: f64) -> f64 {
        g * self.y_scale / self.x_scale[j]
    }
}

/// Inputs, labels and (possibly partially observed) gradients, stored in
/// standardized coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DerivativeDataset {
    x: Matrix,
    y: Vec<f64>,
    dy: Option<Matrix>,
    mask: Vec<bool>,
    standardization: Standardization,
    #[serde(skip)]
    dy_reads: Arc<AtomicUsize>,
}

impl DerivativeDataset {
    /// Builds a dataset from already-standardized arrays. `mask` defaults to
    /// all-observed when `dy` is given.
    pub fn new(
        x: Matrix,
        y: Vec<f64>,
        dy: Option<Matrix>,
        mask: Option<Vec<bool>>,
        standardization: Standardization,
    ) -> Result<Self> {
        let (n, d) = x.shape();
        if y.len() != n {
            return Err(Error::dims(
                "dataset",
                format!("{} labels for {n} inputs", y.len()),
            ));
        }
        if standardization.x_shift.len() != d || standardization.x_scale.len() != d {
            return Err(Error::dims("dataset", "standardization dimension"));
        }
        let mask = match (&dy, mask) {
            (None, _) => vec![false; n * d],
            (Some(g), m) => {
                if g.shape() != (n, d) {
                    return Err(Error::dims("dataset", format!("gradients {:?}", g.shape())));
                }
                let m = m.unwrap_or_else(|| vec![true; n * d]);
                if m.len() != n * d {
                    return Err(Error::dims("dataset", "mask length"));
                }
                m
            }
        };
        let dy = if mask.iter().any(|&b| b) { dy } else { None };
        let finite = x.as_slice().iter().chain(&y).all(|v| v.is_finite())
            && dy.as_ref().is_none_or(|g| {
                g.as_slice()
                    .iter()
                    .zip(&mask)
                    .all(|(v, &m)| !m || v.is_finite())
            });
        if !finite {
            return Err(Error::InvalidConfig(
                "dataset contains non-finite values".into(),
            ));
        }
        Ok(Self {
            x,
            y,
            dy,
            mask,
            standardization,
            dy_reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn has_derivatives(&self) -> bool {
        self.dy.is_some()
    }

    pub fn observed(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.dim() + j]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn num_partials(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Stored partial `∂ⱼyᵢ`, or `None` when unobserved. Every call is counted.
    pub fn partial(&self, i: usize, j: usize) -> Option<f64> {
        self.dy_reads.fetch_add(1, Ordering::Relaxed);
        if self.observed(i, j) {
            self.dy.as_ref().map(|g| g[(i, j)])
        } else {
            None
        }
    }

    /// Full stored gradient matrix (counted as one read).
    pub fn gradients(&self) -> Option<&Matrix> {
        self.dy_reads.fetch_add(1, Ordering::Relaxed);
        self.dy.as_ref()
    }

    /// Number of gradient accesses so far, shared across clones.
    pub fn gradient_reads(&self) -> usize {
        self.dy_reads.load(Ordering::Relaxed)
    }

    /// All scalar observations, point-major (label first, then observed
    /// partials), with their stored targets. Gradients are not touched when
    /// `with_derivatives` is false.
    pub fn observations(&self, with_derivatives: bool) -> (Vec<Observation>, Vec<f64>) {
        let d = self.dim();
        let mut obs = Vec::with_capacity(self.len() * (1 + d));
        let mut targets = Vec::with_capacity(obs.capacity());
        for i in 0..self.len() {
            obs.push(Observation {
                point: i,
                kind: ObsKind::Label,
            });
            targets.push(self.y[i]);
            if with_derivatives && self.dy.is_some() {
                for j in 0..d {
                    if let Some(g) = self.partial(i, j) {
                        obs.push(Observation {
                            point: i,
                            kind: ObsKind::Partial(j),
                        });
                        targets.push(g);
                    }
                }
            }
        }
        (obs, targets)
    }

    /// A dataset over the chosen rows, sharing the gradient-read counter.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let d = self.dim();
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::dims(
                "subset",
                format!("row {bad} of {}", self.len()),
            ));
        }
        let x = self.x.select_rows(rows);
        let y = rows.iter().map(|&r| self.y[r]).collect();
        let dy = self.dy.as_ref().map(|g| g.select_rows(rows));
        let mask = rows
            .iter()
            .flat_map(|&r| self.mask[r * d..(r + 1) * d].iter().copied())
            .collect();
        let mut out = Self::new(x, y, dy, Some(mask), self.standardization.clone())?;
        out.dy_reads = Arc::clone(&self.dy_reads);
        Ok(out)
    }

    /// The same dataset with gradients removed.
    pub fn without_derivatives(&self) -> Self {
        let mut out = Self::new(
            self.x.clone(),
            self.y.clone(),
            None,
            None,
            self.standardization.clone(),
        )
        .expect("valid dataset stays valid without gradients");
        out.dy_reads = Arc::clone(&self.dy_reads);
        out
    }

    /// Raw-coordinate copy (identity standardization).
    pub fn destandardized(&self) -> Self {
        let s = &self.standardization;
        let d = self.dim();
        let x = Matrix::from_fn(self.len(), d, |i, j| {
            self.x[(i, j)] * s.x_scale[j] + s.x_shift[j]
        });
        let y = self.y.iter().map(|&v| s.y_to_raw(v)).collect();
        let dy = self
            .dy
            .as_ref()
            .map(|g| Matrix::from_fn(self.len(), d, |i, j| s.dy_to_raw(j, g[(i, j)])));
        Self::new(
            x,
            y,
            dy,
            Some(self.mask.clone()),
            Standardization::identity(d),
        )
        .expect("destandardized copy has valid shape")
    }

    /// Re-expresses the dataset under new standardization constants.
    pub fn restandardized(&self, s: &Standardization) -> Result<Self> {
        let raw = self.destandardized();
        let d = self.dim();
        if s.x_shift.len() != d {
            return Err(Error::dims("restandardize", "standardization dimension"));
        }
        let x = Matrix::from_fn(self.len(), d, |i, j| {
            (raw.x[(i, j)] - s.x_shift[j]) / s.x_scale[j]
        });
        let y = raw.y.iter().map(|&v| s.y_to_std(v)).collect();
        let dy = raw
            .dy
            .as_ref()
            .map(|g| Matrix::from_fn(self.len(), d, |i, j| s.dy_to_std(j, g[(i, j)])));
        Self::new(x, y, dy, Some(self.mask.clone()), s.clone())
    }

    /// Standardizes a raw dataset with constants fitted to itself.
    pub fn standardize(&self, bounds: Option<&[(f64, f64)]>) -> Result<Self> {
        let raw = self.destandardized();
        let s = Standardization::fit(&raw.x, &raw.y, bounds);
        raw.restandardized(&s)
    }
}

/// Raw (unstandardized) noisy samples of `f` at uniform points in its box.
pub fn sample_raw(
    f: TestFunction,
    n: usize,
    noise_y: f64,
    noise_g: f64,
    seed: u64,
) -> Result<DerivativeDataset> {
    if n == 0 || noise_y < 0.0 || noise_g < 0.0 || !noise_y.is_finite() || !noise_g.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "sample size {n} and noise levels ({noise_y}, {noise_g}) must be positive/non-negative"
        )));
    }
    let d = f.dim();
    let bounds = f.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut x = Matrix::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    let mut dy = Matrix::zeros(n, d);
    for i in 0..n {
        for (j, (lo, hi)) in bounds.iter().enumerate() {
            x[(i, j)] = rng.random_range(*lo..*hi);
        }
        let (v, g) = f.eval_unchecked(x.row_slice(i));
        y.push(v + noise_y * normal.sample(&mut rng));
        for j in 0..d {
            dy[(i, j)] = g[j] + noise_g * normal.sample(&mut rng);
        }
    }
    DerivativeDataset::new(x, y, Some(dy), None, Standardization::identity(d))
}

/// Noisy samples standardized to the unit box and unit-variance labels.
pub fn sample_dataset(
    f: TestFunction,
    n: usize,
    noise_y: f64,
    noise_g: f64,
    seed: u64,
) -> Result<DerivativeDataset> {
    sample_raw(f, n, noise_y, noise_g, seed)?.standardize(Some(&f.bounds()))
}

/// Column layout: x columns, y column, `(column, dim)` gradient columns, D.
type HeaderLayout = (Vec<usize>, usize, Vec<(usize, usize)>, usize);

fn parse_header(headers: &csv::StringRecord) -> Result<HeaderLayout> {
    let mut xs: Vec<(usize, usize)> = Vec::new();
    let mut y = None;
    let mut dys = Vec::new();
    for (col, name) in headers.iter().enumerate() {
        let name = name.trim();
        if name == "y" {
            if y.replace(col).is_some() {
                return Err(Error::Schema("duplicate `y` column".into()));
            }
        } else if let Some(idx) = name.strip_prefix("dy") {
            let j: usize = idx
                .parse()
                .map_err(|_| Error::Schema(format!("bad column name `{name}`")))?;
            dys.push((j, col));
        } else if let Some(idx) = name.strip_prefix('x') {
            let j: usize = idx
                .parse()
                .map_err(|_| Error::Schema(format!("bad column name `{name}`")))?;
            xs.push((j, col));
        } else {
            return Err(Error::Schema(format!("unexpected column `{name}`")));
        }
    }
    let y = y.ok_or_else(|| Error::Schema("missing `y` column".into()))?;
    xs.sort();
    let d = xs.len();
    if d == 0 || xs.iter().enumerate().any(|(k, (j, _))| *j != k + 1) {
        return Err(Error::Schema("input columns must be x1..xD".into()));
    }
    let mut dcols = Vec::new();
    for (j, col) in dys {
        if j == 0 || j > d {
            return Err(Error::Schema(format!("dy{j} outside 1..{d}")));
        }
        if dcols.iter().any(|(k, _)| *k == j - 1) {
            return Err(Error::Schema(format!("duplicate dy{j}")));
        }
        dcols.push((j - 1, col));
    }
    Ok((xs.into_iter().map(|(_, c)| c).collect(), y, dcols, d))
}

/// Reads a CSV with header `x1..xD, y[, dy1..dyD]`. Empty derivative cells
/// are recorded as unobserved. Values are taken as given (identity
/// standardization).
pub fn load_csv(path: impl AsRef<Path>) -> Result<DerivativeDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(csv_error)?;
    let headers = reader.headers().map_err(csv_error)?.clone();
    let (xcols, ycol, dcols, d) = parse_header(&headers)?;
    let mut xdata = Vec::new();
    let mut y = Vec::new();
    let mut dy = Vec::new();
    let mut mask = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let parse = |col: usize| -> Result<f64> {
            let cell = record.get(col).unwrap_or("");
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    msg: format!(
                        "`{cell}` in column `{}` is not a finite real",
                        &headers[col]
                    ),
                })
        };
        for &c in &xcols {
            xdata.push(parse(c)?);
        }
        y.push(parse(ycol)?);
        let mut gd = vec![0.0; d];
        let mut md = vec![false; d];
        for &(j, c) in &dcols {
            if record.get(c).unwrap_or("").is_empty() {
                continue;
            }
            gd[j] = parse(c)?;
            md[j] = true;
        }
        dy.extend(gd);
        mask.extend(md);
    }
    let n = y.len();
    let x = Matrix::from_vec(n, d, xdata);
    let dy = (!dcols.is_empty()).then(|| Matrix::from_vec(n, d, dy));
    DerivativeDataset::new(x, y, dy, Some(mask), Standardization::identity(d))
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            msg: format!("{other:?}"),
        },
    }
}

/// Writes the dataset in raw coordinates with 17 significant digits.
pub fn save_csv(data: &DerivativeDataset, path: impl AsRef<Path>) -> Result<()> {
    let raw = data.destandardized();
    let d = raw.dim();
    let mut out = BufWriter::new(File::create(path)?);
    let mut header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    let with_dy = raw.has_derivatives();
    if with_dy {
        header.extend((1..=d).map(|j| format!("dy{j}")));
    }
    writeln!(out, "{}", header.join(","))?;
    let fmt = |v: f64| format!("{v:.16e}");
    for i in 0..raw.len() {
        let mut cells: Vec<String> = raw.x.row_slice(i).iter().map(|&v| fmt(v)).collect();
        cells.push(fmt(raw.y[i]));
        if with_dy {
            let g = raw.dy.as_ref().expect("checked");
            for j in 0..d {
                cells.push(if raw.observed(i, j) {
                    fmt(g[(i, j)])
                } else {
                    String::new()
                });
            }
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Active subspace of a fully-observed gradient dataset.
#[derive(Clone, Debug)]
pub struct ActiveSubspace {
    /// D×k, orthonormal columns.
    pub projection: Matrix,
    /// Eigenvalues of `Σ ∇f ∇fᵀ`, descending (all D).
    pub eigenvalues: Vec<f64>,
    /// Triplets `(P_kᵀx, y, P_kᵀ∇f)`.
    pub data: DerivativeDataset,
}

pub fn active_subspace(data: &DerivativeDataset, k: usize) -> Result<ActiveSubspace> {
    let d = data.dim();
    if k == 0 || k > d {
        return Err(Error::InvalidK { k, dim: d });
    }
    if !data.has_derivatives() || data.mask.iter().any(|&m| !m) {
        return Err(Error::MissingGradients);
    }
    let g = data.gradients().ok_or(Error::MissingGradients)?;
    let p = g.t_matmul(g)?;
    let (vals, vecs) = symmetric_eigen(&p)?;
    let mut proj = Matrix::zeros(d, k);
    for c in 0..k {
        let col = vecs.column_vec(c);
        let lead = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            proj[(r, c)] = sign * col[r];
        }
    }
    let x = data.x.matmul(&proj)?;
    let dy = g.matmul(&proj)?;
    let s = Standardization {
        y_shift: data.standardization.y_shift,
        y_scale: data.standardization.y_scale,
        x_shift: vec![0.0; k],
        x_scale: vec![1.0; k],
    };
    let projected = DerivativeDataset::new(x, data.y.clone(), Some(dy), None, s)?;
    Ok(ActiveSubspace {
        projection: proj,
        eigenvalues: vals,
        data: projected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(f: TestFunction, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|j| {
                let (mut p, mut m) = (x.to_vec(), x.to_vec());
                p[j] += h;
                m[j] -= h;
                (f.eval_unchecked(&p).0 - f.eval_unchecked(&m).0) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn sin5_values() {
        let f = TestFunction::Sin5;
        let (v, g) = f.evaluate(&[0.0; 5]).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&c| c == 0.0));
        let (v, g) = f.evaluate(&[0.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        assert!(g.iter().all(|c| c.abs() < 1e-14));
    }

    #[test]
    fn branin_minimizer() {
        let x = [PI, 2.275];
        let (v, g) = TestFunction::Branin.evaluate(&x).unwrap();
        assert!((v - 0.397887).abs() < 1e-6);
        assert!((v - BRANIN_MIN).abs() < 1e-12);
        assert!(g.iter().all(|c| c.abs() < 1e-10), "{g:?}");
        let num = fd_grad(TestFunction::Branin, &x, 1e-5);
        assert!(num.iter().all(|c| c.abs() < 1e-6));
    }

    #[test]
    fn other_known_minima() {
        let (v, _) = TestFunction::SixHumpCamel
            .evaluate(&[0.0898, -0.7126])
            .unwrap();
        assert!((v + 1.0316).abs() < 1e-4);
        let (v, g) = TestFunction::StyblinskiTang
            .evaluate(&[-2.903534; 2])
            .unwrap();
        assert!((v + 39.16617 * 2.0).abs() < 1e-4);
        assert!(g.iter().all(|c| c.abs() < 1e-4));
        let xh = [0.20169, 0.150011, 0.476874, 0.275332, 0.311652, 0.6573];
        let (v, _) = TestFunction::Hartmann6.evaluate(&xh).unwrap();
        assert!((v + 3.32237).abs() < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for f in TestFunction::ALL {
            let bounds = f.bounds();
            for _ in 0..1000 {
                let x: Vec<f64> = bounds
                    .iter()
                    .map(|(lo, hi)| rng.random_range(*lo..*hi))
                    .collect();
                let (_, g) = f.evaluate(&x).unwrap();
                let scale = bounds.iter().map(|(lo, hi)| hi - lo).fold(0.0, f64::max);
                let num = fd_grad(f, &x, 1e-6 * scale);
                for (a, b) in g.iter().zip(&num) {
                    let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
                    assert!(rel <= 1e-5, "{} at {x:?}: {a} vs {b}", f.name());
                }
            }
        }
    }

    #[test]
    fn out_of_box_and_names() {
        assert!(matches!(
            TestFunction::Sin5.evaluate(&[1.5, 0.0, 0.0, 0.0, 0.0]),
            Err(Error::OutOfBox { .. })
        ));
        assert!(matches!(
            TestFunction::from_name("welchm"),
            Err(Error::UnknownFunction(_))
        ));
        for f in TestFunction::ALL {
            assert_eq!(TestFunction::from_name(f.name()).unwrap(), f);
        }
    }

    #[test]
    fn single_noiseless_sample_round_trips() {
        let data = sample_dataset(TestFunction::Branin, 1, 0.0, 0.0, 3).unwrap();
        let s = data.standardization();
        let x = s.x_to_raw(data.x().row_slice(0));
        let (f, _) = TestFunction::Branin.evaluate(&x).unwrap();
        assert_eq!(s.y_to_raw(data.y()[0]), f);
    }

    #[test]
    fn standardized_moments_and_chain_rule() {
        let f = TestFunction::Hartmann6;
        let data = sample_dataset(f, 200, 0.0, 0.0, 8).unwrap();
        let n = data.len() as f64;
        let mean = data.y().iter().sum::<f64>() / n;
        let var = data.y().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-10);
        assert!(data
            .x()
            .as_slice()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
        let s = data.standardization().clone();
        for i in 0..data.len() {
            let x = s.x_to_raw(data.x().row_slice(i));
            let (_, g) = f.evaluate(&x).unwrap();
            for (j, gj) in g.iter().enumerate() {
                let raw = s.dy_to_raw(j, data.partial(i, j).unwrap());
                assert!((raw - gj).abs() <= 1e-10 * gj.abs().max(1.0));
            }
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let a = sample_dataset(TestFunction::Sin5, 50, 0.1, 0.1, 11).unwrap();
        let b = sample_dataset(TestFunction::Sin5, 50, 0.1, 0.1, 11).unwrap();
        let c = sample_dataset(TestFunction::Sin5, 50, 0.1, 0.1, 12).unwrap();
        assert_eq!(a.x(), b.x());
        assert_eq!(a.y(), b.y());
        assert_eq!(a.gradients(), b.gradients());
        assert_ne!(a.y(), c.y());
        assert!(sample_dataset(TestFunction::Sin5, 0, 0.1, 0.1, 1).is_err());
    }

    #[test]
    fn destandardize_round_trip() {
        let data = sample_dataset(TestFunction::SixHumpCamel, 30, 0.2, 0.3, 2).unwrap();
        let back = data
            .destandardized()
            .restandardized(data.standardization())
            .unwrap();
        for (a, b) in data.y().iter().zip(back.y()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        let (ga, gb) = (data.gradients().unwrap(), back.gradients().unwrap());
        assert!(ga.sub(gb).unwrap().max_abs() < 1e-12 * ga.max_abs().max(1.0));
    }

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("dirgp-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn csv_label_only() {
        let p = tmp("labels.csv");
        std::fs::write(&p, "x1,x2,y\n0.1,0.2,1.5\n0.3,0.4,2.5\n-1,2e-3,0\n").unwrap();
        let d = load_csv(&p).unwrap();
        assert_eq!((d.len(), d.dim()), (3, 2));
        assert!(!d.has_derivatives());
        assert_eq!(d.y(), &[1.5, 2.5, 0.0]);
    }

    #[test]
    fn csv_partial_gradient_columns() {
        let p = tmp("dy2.csv");
        std::fs::write(&p, "x1,x2,y,dy2\n0.1,0.2,1.5,0.7\n0.3,0.4,2.5,\n").unwrap();
        let d = load_csv(&p).unwrap();
        assert_eq!(d.mask(), &[false, true, false, false]);
        assert_eq!(d.partial(0, 1), Some(0.7));
        assert_eq!(d.partial(1, 1), None);
        assert_eq!(d.num_partials(), 1);
    }

    #[test]
    fn csv_errors() {
        let p = tmp("bad.csv");
        let mut body = String::from("x1,y\n");
        for i in 0..5 {
            body.push_str(&format!("{i},1\n"));
        }
        body.push_str("0.5,abc\n");
        std::fs::write(&p, body).unwrap();
        match load_csv(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "x1,x3,y\n1,2,3\n").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::Schema(_))));
        std::fs::write(&p, "x1,z\n1,2\n").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::Schema(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let raw = sample_raw(TestFunction::Hartmann6, 25, 0.1, 0.1, 5).unwrap();
        let p = tmp("rt.csv");
        save_csv(&raw, &p).unwrap();
        let back = load_csv(&p).unwrap();
        assert_eq!(raw.x(), back.x());
        assert_eq!(raw.y(), back.y());
        assert_eq!(raw.gradients(), back.gradients());
        assert_eq!(raw.mask(), back.mask());

        let std = sample_dataset(TestFunction::Branin, 10, 0.1, 0.1, 5).unwrap();
        save_csv(&std, &p).unwrap();
        let back = load_csv(&p)
            .unwrap()
            .restandardized(std.standardization())
            .unwrap();
        for (a, b) in std.y().iter().zip(back.y()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0) * 4.0);
        }
    }

    #[test]
    fn active_subspace_rank_one() {
        let n = 10;
        let x = Matrix::from_fn(n, 3, |i, j| (i * 3 + j) as f64 * 0.1);
        let dy = Matrix::from_fn(
            n,
            3,
            |i, j| if j == 0 { (i as f64 - 4.5) * 0.3 } else { 0.0 },
        );
        let data = DerivativeDataset::new(
            x,
            vec![0.0; n],
            Some(dy),
            None,
            Standardization::identity(3),
        )
        .unwrap();
        let a = active_subspace(&data, 1).unwrap();
        assert!((a.projection[(0, 0)] - 1.0).abs() < 1e-14);
        assert!(a.projection[(1, 0)].abs() < 1e-14 && a.projection[(2, 0)].abs() < 1e-14);
        assert_eq!(a.data.dim(), 1);
    }

    #[test]
    fn active_subspace_errors() {
        let data = sample_dataset(TestFunction::Branin, 5, 0.0, 0.0, 1).unwrap();
        assert!(matches!(
            active_subspace(&data, 0),
            Err(Error::InvalidK { .. })
        ));
        assert!(matches!(
            active_subspace(&data, 3),
            Err(Error::InvalidK { .. })
        ));
        let blind = data.without_derivatives();
        assert!(matches!(
            active_subspace(&blind, 1),
            Err(Error::MissingGradients)
        ));
    }

    #[test]
    fn active_subspace_matches_dense_eigensolver() {
        use nalgebra::DMatrix;
        let data = sample_dataset(TestFunction::Hartmann6, 40, 0.0, 0.0, 6).unwrap();
        let a = active_subspace(&data, 3).unwrap();
        let g = data.gradients().unwrap();
        let gm = DMatrix::from_row_slice(g.rows(), g.cols(), g.as_slice());
        let p = gm.transpose() * &gm;
        let eig = nalgebra::SymmetricEigen::new(p.clone());
        let mut oracle: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        oracle.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let scale = oracle[0];
        for (a, b) in a.eigenvalues.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-8 * scale);
        }
        for c in 0..3 {
            let v = nalgebra::DVector::from_iterator(6, (0..6).map(|r| a.projection[(r, c)]));
            let resid = &p * &v - &v * a.eigenvalues[c];
            assert!(resid.norm() <= 1e-8 * scale);
            let lead = v
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(lead > 0.0);
        }
    }
}
