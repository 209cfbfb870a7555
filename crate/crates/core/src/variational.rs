//! Whitened stochastic variational GPs over inducing values and inducing
//! directional derivatives.
//!
//! With `p = 0` this is plain SVGP; with `p = D` and canonical fixed
//! directions it is the variational GP with full inducing derivatives. The
//! variational distribution is `q(ū) = N(Lz m̄, Lz L̄ L̄ᵀ Lzᵀ)` where
//! `Lz Lzᵀ = K̄_ZZ`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Var};
use crate::data::{DerivativeDataset, Standardization};
use crate::error::{Error, Result};
use crate::kernels::{
    augmented_size, normalize_rows, DirectionSet, KernelOp, ObsKind, Observation, PriorVarianceOp,
    RbfParams, SideSpec,
};
use crate::linalg::{lower_abt, mirror_lower, Matrix};
use crate::optim::{inv_softplus, softplus, Adam, MultiStep, RawTheta, ThetaVars};
use crate::posterior::{nll_rmse_from, GradientMoments, PosteriorMoments, VARIANCE_FLOOR};

pub mod reference;

pub const CHECKPOINT_VERSION: u32 = 1;
const LN_2PI: f64 = 1.837_877_066_409_345_5;
const PREDICT_CHUNK: usize = 2048;

/// Inducing locations, directions and whitened variational parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingState {
    pub z: Matrix,
    pub directions: DirectionSet,
    /// Whitened mean, length `M(p+1)`.
    pub m_bar: Vec<f64>,
    /// Lower-triangular whitened covariance factor with positive diagonal.
    pub l_bar: Matrix,
}

impl InducingState {
    pub fn num_points(&self) -> usize {
        self.z.rows()
    }

    pub fn per_point(&self) -> usize {
        self.directions.per_point
    }

    /// Inducing matrix size `M(p+1)`.
    pub fn size(&self) -> usize {
        augmented_size(self.num_points(), self.per_point())
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.size();
        if self.directions.num_points != self.num_points()
            || self.m_bar.len() != q
            || self.l_bar.shape() != (q, q)
            || (self.per_point() > 0 && self.directions.dim() != self.dim())
        {
            return Err(Error::dims(
                "inducing state",
                format!(
                    "M={} p={} with m̄ of {} and L̄ {:?}",
                    self.num_points(),
                    self.per_point(),
                    self.m_bar.len(),
                    self.l_bar.shape()
                ),
            ));
        }
        if self.l_bar.diagonal().iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidConfig("L̄ diagonal must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form `KL(q(ū) ‖ p(ū))` in the whitened space.
    pub fn kl(&self) -> f64 {
        let q = self.size() as f64;
        let mm: f64 = self.m_bar.iter().map(|v| v * v).sum();
        let ll = self.l_bar.as_slice().iter().map(|v| v * v).sum::<f64>();
        let ld: f64 = self.l_bar.diagonal().iter().map(|v| v.ln()).sum();
        0.5 * (mm + ll - 2.0 * ld - q)
    }
}

/// One scalar observation in a minibatch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchItem {
    pub point: usize,
    pub kind: ObsKind,
    pub target: f64,
}

/// Every scalar observation of `data`, labels and (optionally) observed partials.
pub fn batch_items(data: &DerivativeDataset, with_derivatives: bool) -> Vec<BatchItem> {
    let (obs, targets) = data.observations(with_derivatives);
    obs.into_iter()
        .zip(targets)
        .map(|(o, target)| BatchItem {
            point: o.point,
            kind: o.kind,
            target,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Elbo,
    Ppgpr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirectionInit {
    /// Random, orthonormal within each point's set when `p ≤ D`.
    Random,
    /// `Vᵢ = I`; requires `p = D`.
    Canonical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub num_inducing: usize,
    pub directions_per_point: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub jitter: f64,
    pub use_derivatives: bool,
    pub learn_directions: bool,
    pub direction_init: DirectionInit,
    /// Starting hyperparameters; a default guess when absent.
    pub init_theta: Option<RbfParams>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            num_inducing: 20,
            directions_per_point: 0,
            batch_size: 256,
            epochs: 100,
            learning_rate: 0.01,
            seed: 0,
            loss: LossKind::Elbo,
            jitter: 1e-8,
            use_derivatives: false,
            learn_directions: true,
            direction_init: DirectionInit::Random,
            init_theta: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.num_inducing == 0 {
            return Err(Error::InvalidConfig(
                "batch size and M must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::InvalidConfig(
                "learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn default_theta(dim: usize) -> RbfParams {
    RbfParams {
        lengthscales: vec![0.5; dim],
        outputscale: 1.0,
        mean_const: 0.0,
        noise_label: 0.1,
        noise_grad: 0.1,
    }
}

fn orthonormalize(rows: &mut [Vec<f64>]) {
    for i in 0..rows.len() {
        for k in 0..i {
            let proj: f64 = rows[i].iter().zip(&rows[k]).map(|(a, b)| a * b).sum();
            let (head, tail) = rows.split_at_mut(i);
            tail[0]
                .iter_mut()
                .zip(&head[k])
                .for_each(|(a, b)| *a -= proj * b);
        }
        let n = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        rows[i].iter_mut().for_each(|v| *v /= n);
    }
}

/// Random subset of training inputs as `Z`, random directions, `m̄ = 0`, `L̄ = I`.
pub fn init_inducing(
    data: &DerivativeDataset,
    m: usize,
    p: usize,
    seed: u64,
) -> Result<InducingState> {
    init_inducing_with(data, m, p, seed, DirectionInit::Random)
}

pub fn init_inducing_with(
    data: &DerivativeDataset,
    m: usize,
    p: usize,
    seed: u64,
    directions: DirectionInit,
) -> Result<InducingState> {
    let d = data.dim();
    if m == 0 || m > data.len() {
        return Err(Error::InvalidConfig(format!(
            "M = {m} inducing points from {} training points",
            data.len()
        )));
    }
    if directions == DirectionInit::Canonical && p != d {
        return Err(Error::InvalidConfig(format!(
            "canonical directions need p = D = {d}, got p = {p}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(m);
    let z = data.x().select_rows(&idx);
    let dirs = match directions {
        DirectionInit::Canonical => DirectionSet::canonical(m, d),
        DirectionInit::Random => {
            let mut v = Matrix::zeros(m * p, d);
            for pt in 0..m {
                let mut set: Vec<Vec<f64>> = (0..p)
                    .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
                    .collect();
                if p <= d {
                    orthonormalize(&mut set);
                }
                for (t, row) in set.into_iter().enumerate() {
                    v.row_slice_mut(pt * p + t).copy_from_slice(&row);
                }
            }
            normalize_rows(&mut v);
            DirectionSet::new(m, p, v)?
        }
    };
    let q = augmented_size(m, p);
    Ok(InducingState {
        z,
        directions: dirs,
        m_bar: vec![0.0; q],
        l_bar: Matrix::identity(q),
    })
}

/// Unconstrained training parameters.
#[derive(Clone, Debug)]
pub struct RawParams {
    pub theta: RawTheta,
    pub z: Matrix,
    pub v: Matrix,
    pub m_bar: Matrix,
    /// Strict lower triangle as-is, diagonal through softplus.
    pub l_raw: Matrix,
    pub per_point: usize,
}

/// Constrained model quantities on a tape.
pub struct ModelVars<'t> {
    pub theta: ThetaVars<'t>,
    pub z: Var<'t>,
    pub v: Var<'t>,
    pub m_bar: Var<'t>,
    pub l_bar: Var<'t>,
    l_diag: Var<'t>,
    pub per_point: usize,
}

impl RawParams {
    pub fn new(state: &InducingState, theta: &RbfParams) -> Self {
        let mut l_raw = state.l_bar.lower_triangle(false);
        for i in 0..l_raw.rows() {
            l_raw[(i, i)] = inv_softplus(l_raw[(i, i)]);
        }
        Self {
            theta: RawTheta::from_params(theta),
            z: state.z.clone(),
            v: state.directions.directions.clone(),
            m_bar: Matrix::column(state.m_bar.clone()),
            l_raw,
            per_point: state.per_point(),
        }
    }

    pub fn to_model(&self) -> Result<(InducingState, RbfParams)> {
        let mut l_bar = self.l_raw.lower_triangle(false);
        for i in 0..l_bar.rows() {
            l_bar[(i, i)] = softplus(l_bar[(i, i)]);
        }
        let state = InducingState {
            z: self.z.clone(),
            directions: DirectionSet::new(self.z.rows(), self.per_point, self.v.clone())?,
            m_bar: self.m_bar.as_slice().to_vec(),
            l_bar,
        };
        Ok((state, self.theta.to_params()))
    }

    /// Leaves in the order θ (5), Z, V, m̄, L̄ raw.
    pub fn to_vec(&self) -> Vec<Matrix> {
        let mut out = self.theta.as_vec();
        out.extend([
            self.z.clone(),
            self.v.clone(),
            self.m_bar.clone(),
            self.l_raw.clone(),
        ]);
        out
    }

    pub fn from_vec(mut v: Vec<Matrix>, per_point: usize) -> Self {
        let l_raw = v.pop().expect("9 leaves");
        let m_bar = v.pop().expect("9 leaves");
        let dirs = v.pop().expect("9 leaves");
        let z = v.pop().expect("9 leaves");
        Self {
            theta: RawTheta::from_vec(v),
            z,
            v: dirs,
            m_bar,
            l_raw,
            per_point,
        }
    }

    pub fn record<'t>(&self, tape: &'t Tape) -> (ModelVars<'t>, Vec<Var<'t>>) {
        let leaves: Vec<Var<'t>> = self.to_vec().into_iter().map(|m| tape.leaf(m)).collect();
        (ModelVars::from_leaves(&leaves, self.per_point), leaves)
    }
}

impl<'t> ModelVars<'t> {
    /// Builds constrained quantities from the nine leaves of [`RawParams::to_vec`].
    pub fn from_leaves(leaves: &[Var<'t>], per_point: usize) -> Self {
        let theta = ThetaVars::from_leaves([leaves[0], leaves[1], leaves[2], leaves[3], leaves[4]]);
        let l_raw = leaves[8];
        let l_diag = l_raw.diag().softplus();
        let l_bar = l_raw
            .tril(true)
            .add(l_diag.diag_embed().expect("column diagonal"))
            .expect("square factor");
        Self {
            theta,
            z: leaves[5],
            v: leaves[6],
            m_bar: leaves[7],
            l_bar,
            l_diag,
            per_point,
        }
    }

    fn size(&self) -> usize {
        self.m_bar.shape().0
    }

    /// Cholesky factor of `K̄_ZZ`.
    pub fn prior_factor(&self, jitter: f64) -> Result<Var<'t>> {
        let spec = SideSpec::Inducing {
            per_point: self.per_point,
        };
        let kzz = KernelOp::record(
            spec.clone(),
            spec,
            false,
            self.theta.lengthscales,
            self.theta.outputscale,
            Some((self.z, self.v)),
        )?;
        Ok(kzz.cholesky(jitter)?.0)
    }

    /// Latent mean (prior mean included) and variance of each row, as 1×B rows.
    pub fn row_moments(
        &self,
        lz: Var<'t>,
        x: &Matrix,
        obs: &[Observation],
    ) -> Result<(Var<'t>, Var<'t>)> {
        let kzx = KernelOp::record(
            SideSpec::Observed {
                x: x.clone(),
                obs: obs.to_vec(),
            },
            SideSpec::Inducing {
                per_point: self.per_point,
            },
            true,
            self.theta.lengthscales,
            self.theta.outputscale,
            Some((self.z, self.v)),
        )?;
        let at = lz.tri_solve(kzx, false)?;
        let is_label: Vec<bool> = obs.iter().map(|o| o.kind == ObsKind::Label).collect();
        let mean = self
            .m_bar
            .t()
            .matmul(at)?
            .add(self.theta.row_mean(&is_label)?.t())?;
        let kdiag = PriorVarianceOp::record(
            obs.iter().map(|o| o.kind).collect(),
            self.theta.lengthscales,
            self.theta.outputscale,
        )?;
        let var = kdiag
            .t()
            .add(WhitenedVarianceOp::record(at, self.l_bar)?)?
            .clamp_min(VARIANCE_FLOOR);
        Ok((mean, var))
    }

    pub fn kl(&self) -> Result<Var<'t>> {
        let q = self.size() as f64;
        let tape = self.m_bar.tape();
        self.m_bar
            .square()
            .sum()
            .add(self.l_bar.square().sum())?
            .sub(self.l_diag.ln().sum().scale(2.0))?
            .add_scalar(tape.scalar(-q))
            .map(|v| v.scale(0.5))
    }
}

/// `colsum(A ∘ (C A))` with `C = L̄L̄ᵀ − I`: the variational correction to the
/// prior variance of each column of `A = Lz⁻¹K̄_ZX` (1×B).
///
/// Tape inputs: `A` (Q×B), `L̄` (Q×Q). Keeps `C A` for the backward pass, which
/// then needs one Q×Q×B product instead of the four of the unfused chain.
struct WhitenedVarianceOp {
    ca: Matrix,
}

impl WhitenedVarianceOp {
    fn record<'t>(a: Var<'t>, l_bar: Var<'t>) -> Result<Var<'t>> {
        let (ca, value) = {
            let (a, l) = (a.value(), l_bar.value());
            let mut c = lower_abt(&l, &l, 1.0)?;
            mirror_lower(&mut c);
            c.add_diagonal(-1.0);
            let ca = c.matmul(&a)?;
            let value = Matrix::row(ca.hadamard(&a)?.col_sums());
            (ca, value)
        };
        Ok(a.tape().custom(Box::new(Self { ca }), &[a, l_bar], value))
    }
}

impl CustomOp for WhitenedVarianceOp {
    fn name(&self) -> &'static str {
        "whitened_variance"
    }

    fn backward(&self, grad: &Matrix, inputs: &[&Matrix], _output: &Matrix) -> Vec<Option<Matrix>> {
        let (a, l) = (inputs[0], inputs[1]);
        let g = grad.as_slice();
        let scale_cols = |m: &Matrix, f: f64| {
            let mut out = m.clone();
            for row in 0..out.rows() {
                out.row_slice_mut(row)
                    .iter_mut()
                    .zip(g)
                    .for_each(|(v, g)| *v *= f * g);
            }
            out
        };
        // ∂/∂A = 2 C A diag(g); ∂/∂C = A diag(g) Aᵀ; ∂/∂L̄ = 2 (∂/∂C) L̄
        let d_a = scale_cols(&self.ca, 2.0);
        let d_l = lower_abt(&scale_cols(a, 1.0), a, 2.0).and_then(|mut dc| {
            mirror_lower(&mut dc);
            dc.matmul(l)
        });
        vec![Some(d_a), d_l.ok()]
    }
}

/// Minibatch objective pieces on a tape.
pub struct Objective<'t> {
    /// Weighted expected log-likelihood (or PPGPR) sum.
    pub data_term: Var<'t>,
    pub kl: Var<'t>,
    /// `data_term − kl`
    pub elbo: Var<'t>,
}

/// Gathers batch rows into a local point matrix.
fn local_batch(x: &Matrix, batch: &[BatchItem]) -> Result<(Matrix, Vec<Observation>, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = x.cols();
    let mut pts = Matrix::zeros(batch.len(), d);
    let mut obs = Vec::with_capacity(batch.len());
    for (b, item) in batch.iter().enumerate() {
        if item.point >= x.rows() {
            return Err(Error::dims(
                "batch",
                format!("point {} of {}", item.point, x.rows()),
            ));
        }
        if let ObsKind::Partial(j) = item.kind {
            if j >= d {
                return Err(Error::UnknownBatchKind(format!(
                    "partial {j} in dimension {d}"
                )));
            }
        }
        pts.row_slice_mut(b)
            .copy_from_slice(x.row_slice(item.point));
        obs.push(Observation {
            point: b,
            kind: item.kind,
        });
    }
    Ok((pts, obs, batch.iter().map(|b| b.target).collect()))
}

/// Minibatch ELBO / PPGPR objective. Every row is weighted by
/// `(n_labels + n_partials) / B`, the inverse inclusion probability under
/// uniform sampling from the pooled observation stream.
pub fn objective<'t>(
    vars: &ModelVars<'t>,
    x: &Matrix,
    batch: &[BatchItem],
    n_labels: usize,
    n_partials: usize,
    kind: LossKind,
    jitter: f64,
) -> Result<Objective<'t>> {
    let (pts, obs, targets) = local_batch(x, batch)?;
    let tape = vars.m_bar.tape();
    let lz = vars.prior_factor(jitter)?;
    let (mean, var) = vars.row_moments(lz, &pts, &obs)?;
    let is_label: Vec<bool> = obs.iter().map(|o| o.kind == ObsKind::Label).collect();
    let noise = vars.theta.row_noise(&is_label)?.t();
    let resid2 = tape.leaf(Matrix::row(targets)).sub(mean)?.square();
    let b = batch.len() as f64;
    let per_row = match kind {
        LossKind::Elbo => noise
            .ln()
            .add_scalar(tape.scalar(LN_2PI))?
            .add(resid2.add(var)?.div(noise)?)?,
        LossKind::Ppgpr => {
            let total = noise.add(var)?;
            total
                .ln()
                .add_scalar(tape.scalar(LN_2PI))?
                .add(resid2.div(total)?)?
        }
    };
    let weight = (n_labels + n_partials) as f64 / b;
    let data_term = per_row.sum().scale(-0.5 * weight);
    let kl = vars.kl()?;
    let elbo = data_term.sub(kl)?;
    Ok(Objective {
        data_term,
        kl,
        elbo,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboValue {
    pub data_term: f64,
    pub kl: f64,
    pub elbo: f64,
}

/// Evaluates [`objective`] at a fixed state.
#[allow(clippy::too_many_arguments)]
pub fn elbo_minibatch(
    state: &InducingState,
    theta: &RbfParams,
    x: &Matrix,
    batch: &[BatchItem],
    n_labels: usize,
    n_partials: usize,
    kind: LossKind,
    jitter: f64,
) -> Result<ElboValue> {
    state.validate()?;
    let tape = Tape::new();
    let (vars, _) = RawParams::new(state, theta).record(&tape);
    let o = objective(&vars, x, batch, n_labels, n_partials, kind, jitter)?;
    Ok(ElboValue {
        data_term: o.data_term.item(),
        kl: o.kl.item(),
        elbo: o.elbo.item(),
    })
}

/// Full-data objective: every observation in one batch.
pub fn elbo_full(
    state: &InducingState,
    theta: &RbfParams,
    data: &DerivativeDataset,
    with_derivatives: bool,
    kind: LossKind,
    jitter: f64,
) -> Result<ElboValue> {
    let items = batch_items(data, with_derivatives);
    let n_labels = items.iter().filter(|b| b.kind == ObsKind::Label).count();
    elbo_minibatch(
        state,
        theta,
        data.x(),
        &items,
        n_labels,
        items.len() - n_labels,
        kind,
        jitter,
    )
}

/// Per-row predictive moments for observation rows.
pub fn predictive_moments(
    state: &InducingState,
    theta: &RbfParams,
    x: &Matrix,
    obs: &[Observation],
    jitter: f64,
) -> Result<PosteriorMoments> {
    state.validate()?;
    let raw = RawParams::new(state, theta);
    let mut mean = Vec::with_capacity(obs.len());
    let mut var_f = Vec::with_capacity(obs.len());
    for chunk in obs.chunks(PREDICT_CHUNK.max(1)) {
        let tape = Tape::new();
        let (vars, _) = raw.record(&tape);
        let lz = vars.prior_factor(jitter)?;
        let (m, v) = vars.row_moments(lz, x, chunk)?;
        mean.extend_from_slice(m.value().as_slice());
        var_f.extend_from_slice(v.value().as_slice());
    }
    let var_y = var_f
        .iter()
        .zip(obs)
        .map(|(v, o)| v + theta.noise_for(o.kind))
        .collect();
    Ok(PosteriorMoments {
        mean,
        var_f,
        var_y,
        gradients: None,
    })
}

/// Predictive moments at query points (values, and optionally all partials).
pub fn predict(
    state: &InducingState,
    theta: &RbfParams,
    queries: &Matrix,
    with_gradients: bool,
    jitter: f64,
) -> Result<PosteriorMoments> {
    let d = queries.cols();
    let per = if with_gradients { d + 1 } else { 1 };
    let obs: Vec<Observation> = (0..queries.rows())
        .flat_map(|i| {
            (0..per).map(move |c| Observation {
                point: i,
                kind: if c == 0 {
                    ObsKind::Label
                } else {
                    ObsKind::Partial(c - 1)
                },
            })
        })
        .collect();
    let rows = predictive_moments(state, theta, queries, &obs, jitter)?;
    if !with_gradients {
        return Ok(rows);
    }
    let n = queries.rows();
    let mut out = PosteriorMoments {
        mean: Vec::with_capacity(n),
        var_f: Vec::with_capacity(n),
        var_y: Vec::with_capacity(n),
        gradients: Some(GradientMoments {
            mean: Matrix::zeros(n, d),
            var_f: Matrix::zeros(n, d),
            var_y: Matrix::zeros(n, d),
        }),
    };
    let g = out.gradients.as_mut().expect("just set");
    for (r, o) in obs.iter().enumerate() {
        match o.kind {
            ObsKind::Label => {
                out.mean.push(rows.mean[r]);
                out.var_f.push(rows.var_f[r]);
                out.var_y.push(rows.var_y[r]);
            }
            ObsKind::Partial(j) => {
                g.mean[(o.point, j)] = rows.mean[r];
                g.var_f[(o.point, j)] = rows.var_f[r];
                g.var_y[(o.point, j)] = rows.var_y[r];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean negative log predictive density of test labels.
    pub nll: f64,
    pub rmse: f64,
    /// RMSE over observed test partials, when present.
    pub grad_rmse: Option<f64>,
}

/// Label NLL/RMSE on a test set (in its stored coordinates), plus partial RMSE.
pub fn nll_rmse(
    state: &InducingState,
    theta: &RbfParams,
    test: &DerivativeDataset,
    jitter: f64,
) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::InvalidConfig("empty test set".into()));
    }
    let p = predict(state, theta, test.x(), test.has_derivatives(), jitter)?;
    Ok(test_metrics(&p, test))
}

/// Metrics of predictions made at `test.x()`.
pub fn test_metrics(p: &PosteriorMoments, test: &DerivativeDataset) -> Metrics {
    let (nll, rmse) = nll_rmse_from(&p.mean, &p.var_y, test.y());
    let grad_rmse = match (&p.gradients, test.has_derivatives()) {
        (Some(g), true) => {
            let mut se = 0.0;
            let mut count = 0usize;
            for i in 0..test.len() {
                for j in 0..test.dim() {
                    if let Some(t) = test.partial(i, j) {
                        se += (t - g.mean[(i, j)]).powi(2);
                        count += 1;
                    }
                }
            }
            (count > 0).then(|| (se / count as f64).sqrt())
        }
        _ => None,
    };
    Metrics {
        nll,
        rmse,
        grad_rmse,
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub state: InducingState,
    pub theta: RbfParams,
    /// Mean minibatch loss (negative objective per observation) per epoch.
    pub loss_trace: Vec<f64>,
    pub steps: usize,
}

/// Shuffled minibatch Adam over the pooled label/partial stream.
pub fn train(data: &DerivativeDataset, config: &TrainingConfig) -> Result<TrainOutput> {
    config.validate()?;
    let d = data.dim();
    let p = config.directions_per_point;
    let state = init_inducing_with(
        data,
        config.num_inducing,
        p,
        config.seed,
        config.direction_init,
    )?;
    let theta = config
        .init_theta
        .clone()
        .unwrap_or_else(|| default_theta(d));
    if theta.dim() != d {
        return Err(Error::dims("train", "initial lengthscales"));
    }
    theta.validate()?;
    train_from(data, config, state, theta)
}

/// Continues training from a given state and θ.
pub fn train_from(
    data: &DerivativeDataset,
    config: &TrainingConfig,
    state: InducingState,
    theta: RbfParams,
) -> Result<TrainOutput> {
    config.validate()?;
    state.validate()?;
    let items = batch_items(data, config.use_derivatives);
    let n_labels = items.iter().filter(|b| b.kind == ObsKind::Label).count();
    let n_partials = items.len() - n_labels;
    let n_total = items.len() as f64;
    let per_point = state.per_point();
    let learn_v = config.learn_directions && per_point > 0;

    let mut params = RawParams::new(&state, &theta).to_vec();
    let mut adam = Adam::new(&params);
    let schedule = MultiStep::halving(config.learning_rate, config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0bad_cafe);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = schedule.lr(epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| items[i]));
            let wrap = |e: Error| Error::Training {
                epoch,
                step,
                source: Box::new(e),
            };
            let tape = Tape::new();
            let leaves: Vec<Var> = params.iter().map(|m| tape.leaf(m.clone())).collect();
            let vars = ModelVars::from_leaves(&leaves, per_point);
            let obj = objective(
                &vars,
                data.x(),
                &batch,
                n_labels,
                n_partials,
                config.loss,
                config.jitter,
            )
            .map_err(wrap)?;
            let loss = obj.elbo.scale(-1.0 / n_total);
            let value = loss.item();
            if !value.is_finite() {
                return Err(wrap(Error::NotPositiveDefinite { jitter: f64::NAN }));
            }
            epoch_loss += value;
            batches += 1;
            let grads = tape.gradient(loss).map_err(wrap)?;
            let mut g: Vec<Matrix> = leaves.iter().map(|&l| grads.wrt(l)).collect();
            if !learn_v {
                g[6] = Matrix::zeros(g[6].rows(), g[6].cols());
            }
            adam.step(&mut params, &g, lr);
            if learn_v {
                normalize_rows(&mut params[6]);
            }
            steps += 1;
        }
        trace.push(epoch_loss / batches.max(1) as f64);
        log::debug!("epoch {epoch}: loss {:.6}", trace.last().unwrap());
    }
    let (state, theta) = RawParams::from_vec(params, per_point).to_model()?;
    Ok(TrainOutput {
        state,
        theta,
        loss_trace: trace,
        steps,
    })
}

/// Everything needed to reload a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: String,
    pub config: TrainingConfig,
    pub theta: RbfParams,
    pub state: InducingState,
    pub standardization: Standardization,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if c.format_version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint format {} (expected {CHECKPOINT_VERSION})",
                c.format_version
            )));
        }
        c.state.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests;
