//! Exact GP regression on labels and (optionally) partial derivatives.

use crate::autodiff::{Tape, Var};
use crate::data::DerivativeDataset;
use crate::error::{Error, Result};
use crate::kernels::{
    kernel_matrix, observation_prior_variances, KernelOp, ObsKind, Observation, RbfParams, Side,
    SideSpec,
};
use crate::linalg::{cholesky_with_jitter, log_det, solve_triangular, CholeskyFactor, Matrix};
use crate::optim::{Adam, MultiStep, RawTheta, ThetaVars};
use crate::posterior::{GradientMoments, PosteriorMoments};

pub const DEFAULT_ROW_CAP: usize = 3000;
pub const DEFAULT_JITTER: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A conditioned exact GP. Immutable once built.
#[derive(Clone, Debug)]
pub struct ExactModel {
    x: Matrix,
    obs: Vec<Observation>,
    targets: Vec<f64>,
    theta: RbfParams,
    factor: CholeskyFactor,
    alpha: Vec<f64>,
}

fn residuals(obs: &[Observation], targets: &[f64], mean: f64) -> Vec<f64> {
    obs.iter()
        .zip(targets)
        .map(|(o, &t)| match o.kind {
            ObsKind::Label => t - mean,
            ObsKind::Partial(_) => t,
        })
        .collect()
}

fn check_cap(rows: usize, cap: usize) -> Result<()> {
    if rows > cap {
        return Err(Error::CapExceeded { rows, cap });
    }
    Ok(())
}

impl ExactModel {
    pub fn new(
        x: Matrix,
        obs: Vec<Observation>,
        targets: Vec<f64>,
        theta: RbfParams,
        cap: usize,
    ) -> Result<Self> {
        theta.validate()?;
        check_cap(obs.len(), cap)?;
        if targets.len() != obs.len() {
            return Err(Error::dims(
                "exact model",
                format!("{} targets for {} observations", targets.len(), obs.len()),
            ));
        }
        let side = Side::Observed { x: &x, obs: &obs };
        let mut k = kernel_matrix(side, side, &theta)?;
        for (i, o) in obs.iter().enumerate() {
            k[(i, i)] += theta.noise_for(o.kind);
        }
        let factor = cholesky_with_jitter(&k, DEFAULT_JITTER)?;
        let r = residuals(&obs, &targets, theta.mean_const);
        let alpha = factor.solve_vec(&r)?;
        Ok(Self {
            x,
            obs,
            targets,
            theta,
            factor,
            alpha,
        })
    }

    pub fn from_dataset(
        data: &DerivativeDataset,
        theta: RbfParams,
        use_derivatives: bool,
        cap: usize,
    ) -> Result<Self> {
        let (obs, targets) = data.observations(use_derivatives);
        Self::new(data.x().clone(), obs, targets, theta, cap)
    }

    pub fn theta(&self) -> &RbfParams {
        &self.theta
    }

    pub fn num_rows(&self) -> usize {
        self.obs.len()
    }

    pub fn jitter_used(&self) -> f64 {
        self.factor.jitter_used
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let r = residuals(&self.obs, &self.targets, self.theta.mean_const);
        let quad: f64 = r.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let n = self.obs.len() as f64;
        -0.5 * quad - 0.5 * log_det(&self.factor) - 0.5 * n * LN_2PI
    }

    /// Marginal moments at each query row; with `with_gradients`, also of
    /// every partial derivative.
    pub fn posterior(&self, queries: &Matrix, with_gradients: bool) -> Result<PosteriorMoments> {
        let d = self.x.cols();
        if queries.cols() != d {
            return Err(Error::dims(
                "posterior",
                format!("queries have {} columns, model {d}", queries.cols()),
            ));
        }
        let per = if with_gradients { d + 1 } else { 1 };
        let qobs: Vec<Observation> = (0..queries.rows())
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
        let kxq = kernel_matrix(
            Side::Observed {
                x: &self.x,
                obs: &self.obs,
            },
            Side::Observed {
                x: queries,
                obs: &qobs,
            },
            &self.theta,
        )?;
        let mean_f = kxq.t_matmul(&Matrix::column(self.alpha.clone()))?;
        let v = solve_triangular(&self.factor, &kxq, false)?;
        let explained = v.hadamard(&v)?.col_sums();
        let prior = observation_prior_variances(&qobs, &self.theta);
        let nq = queries.rows();
        let mut mean = Vec::with_capacity(nq);
        let mut var_f = Vec::with_capacity(nq);
        let mut var_y = Vec::with_capacity(nq);
        let mut gm = Matrix::zeros(nq, d);
        let mut gv = Matrix::zeros(nq, d);
        let mut gy = Matrix::zeros(nq, d);
        for (c, o) in qobs.iter().enumerate() {
            let vf = (prior[c] - explained[c]).max(0.0);
            match o.kind {
                ObsKind::Label => {
                    mean.push(mean_f[(c, 0)] + self.theta.mean_const);
                    var_f.push(vf);
                    var_y.push(vf + self.theta.noise_label);
                }
                ObsKind::Partial(j) => {
                    gm[(o.point, j)] = mean_f[(c, 0)];
                    gv[(o.point, j)] = vf;
                    gy[(o.point, j)] = vf + self.theta.noise_grad;
                }
            }
        }
        Ok(PosteriorMoments {
            mean,
            var_f,
            var_y,
            gradients: with_gradients.then_some(GradientMoments {
                mean: gm,
                var_f: gv,
                var_y: gy,
            }),
        })
    }
}

/// Log marginal likelihood recorded on a tape.
pub fn log_marginal_likelihood_var<'t>(
    tape: &'t Tape,
    x: &Matrix,
    obs: &[Observation],
    targets: &[f64],
    theta: &ThetaVars<'t>,
    jitter: f64,
) -> Result<Var<'t>> {
    let spec = SideSpec::Observed {
        x: x.clone(),
        obs: obs.to_vec(),
    };
    let k = KernelOp::record(
        spec.clone(),
        spec,
        false,
        theta.lengthscales,
        theta.outputscale,
        None,
    )?;
    let is_label: Vec<bool> = obs.iter().map(|o| o.kind == ObsKind::Label).collect();
    let kn = k.add(theta.row_noise(&is_label)?.diag_embed()?)?;
    let (l, _) = kn.cholesky(jitter)?;
    let r = tape
        .leaf(Matrix::column(targets.to_vec()))
        .sub(theta.row_mean(&is_label)?)?;
    let w = l.tri_solve(r, false)?;
    let n = obs.len() as f64;
    let half_logdet = l.diag().ln().sum();
    w.square()
        .sum()
        .scale(-0.5)
        .sub(half_logdet)?
        .add_scalar(tape.scalar(-0.5 * n * LN_2PI))
}

#[derive(Clone, Debug)]
pub struct ExactFitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub use_derivatives: bool,
    pub cap: usize,
    pub jitter: f64,
}

impl Default for ExactFitConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            learning_rate: 0.05,
            use_derivatives: true,
            cap: DEFAULT_ROW_CAP,
            jitter: DEFAULT_JITTER,
        }
    }
}

/// Maximizes the log marginal likelihood with full-batch Adam.
/// Returns the conditioned model and the per-iteration negative LML per row.
pub fn fit(
    data: &DerivativeDataset,
    init: &RbfParams,
    cfg: &ExactFitConfig,
) -> Result<(ExactModel, Vec<f64>)> {
    init.validate()?;
    let (obs, targets) = data.observations(cfg.use_derivatives);
    check_cap(obs.len(), cfg.cap)?;
    let n = obs.len() as f64;
    let mut params = RawTheta::from_params(init).as_vec();
    let mut adam = Adam::new(&params);
    let schedule = MultiStep::halving(cfg.learning_rate, cfg.iterations);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let tape = Tape::new();
        let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let vars = ThetaVars::from_leaves([leaves[0], leaves[1], leaves[2], leaves[3], leaves[4]]);
        let lml = log_marginal_likelihood_var(&tape, data.x(), &obs, &targets, &vars, cfg.jitter)
            .map_err(|e| Error::Training {
            epoch: it,
            step: 0,
            source: Box::new(e),
        })?;
        let loss = lml.scale(-1.0 / n);
        trace.push(loss.item());
        let grads = tape.gradient(loss)?;
        let g: Vec<Matrix> = leaves.iter().map(|&l| grads.wrt(l)).collect();
        adam.step(&mut params, &g, schedule.lr(it));
    }
    let theta = RawTheta::from_vec(params).to_params();
    let model = ExactModel::new(data.x().clone(), obs, targets, theta, cfg.cap)?;
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_check;
    use crate::data::{sample_dataset, Standardization, TestFunction};
    use nalgebra::{DMatrix, DVector};

    fn params(ls: f64, os: f64, noise: f64) -> RbfParams {
        RbfParams {
            lengthscales: vec![ls],
            outputscale: os,
            mean_const: 0.0,
            noise_label: noise,
            noise_grad: noise,
        }
    }

    #[test]
    fn single_point_standard_normal() {
        let x = Matrix::from_rows(&[vec![0.3]]);
        let mut th = params(1.0, 0.5, 0.5);
        th.mean_const = 0.7;
        let obs = vec![Observation {
            point: 0,
            kind: ObsKind::Label,
        }];
        let m = ExactModel::new(x, obs, vec![0.7], th, DEFAULT_ROW_CAP).unwrap();
        assert!((m.log_marginal_likelihood() + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    /// 1-D kernel and its derivatives written out directly.
    fn naive_1d(a: f64, ka: usize, b: f64, kb: usize, ls: f64, s: f64) -> f64 {
        let d = a - b;
        let k = s * (-0.5 * d * d / (ls * ls)).exp();
        let l2 = ls * ls;
        match (ka, kb) {
            (0, 0) => k,
            (1, 0) => -k * d / l2,
            (0, 1) => k * d / l2,
            _ => k * (1.0 / l2 - d * d / (l2 * l2)),
        }
    }

    #[test]
    fn matches_naive_dense_evaluation() {
        let xs = [0.1, 0.8];
        let rows = [
            (0usize, 0usize, 0.4),
            (0, 1, -1.2),
            (1, 0, 1.1),
            (1, 1, 0.3),
        ];
        let (ls, s, nl, ng, mu) = (0.6, 1.4, 0.05, 0.02, 0.2);
        let n = rows.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            let (pi, ki, _) = rows[i];
            let (pj, kj, _) = rows[j];
            let v = naive_1d(xs[pi], ki, xs[pj], kj, ls, s);
            if i == j {
                v + if ki == 0 { nl } else { ng }
            } else {
                v
            }
        });
        let r = DVector::from_iterator(
            n,
            rows.iter()
                .map(|&(_, k, t)| if k == 0 { t - mu } else { t }),
        );
        let oracle = -0.5 * (r.transpose() * k.clone().try_inverse().unwrap() * &r)[(0, 0)]
            - 0.5 * k.determinant().ln()
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

        let x = Matrix::from_rows(&[vec![xs[0]], vec![xs[1]]]);
        let obs: Vec<Observation> = rows
            .iter()
            .map(|&(p, k, _)| Observation {
                point: p,
                kind: if k == 0 {
                    ObsKind::Label
                } else {
                    ObsKind::Partial(0)
                },
            })
            .collect();
        let th = RbfParams {
            lengthscales: vec![ls],
            outputscale: s,
            mean_const: mu,
            noise_label: nl,
            noise_grad: ng,
        };
        let m = ExactModel::new(x, obs, rows.iter().map(|r| r.2).collect(), th, 10).unwrap();
        assert!((m.log_marginal_likelihood() - oracle).abs() < 1e-10);
    }

    #[test]
    fn derivative_row_vanishes_under_huge_noise() {
        let x = Matrix::from_rows(&[vec![0.1, 0.2], vec![0.5, 0.9], vec![0.7, 0.3]]);
        let labels = vec![0.3, -0.4, 1.0];
        let mut th = RbfParams::isotropic(2, 0.5, 1.0);
        th.noise_label = 0.01;
        let obs: Vec<Observation> = (0..3)
            .map(|i| Observation {
                point: i,
                kind: ObsKind::Label,
            })
            .collect();
        let base = ExactModel::new(x.clone(), obs.clone(), labels.clone(), th.clone(), 10)
            .unwrap()
            .log_marginal_likelihood();
        let big = 1e12;
        th.noise_grad = big;
        let mut obs2 = obs;
        obs2.push(Observation {
            point: 1,
            kind: ObsKind::Partial(0),
        });
        let mut t2 = labels;
        let g = 0.8;
        t2.push(g);
        let with = ExactModel::new(x, obs2, t2, th, 10)
            .unwrap()
            .log_marginal_likelihood();
        // remove the row's own (uninformative) density under the noise alone
        let own = -0.5 * ((2.0 * std::f64::consts::PI * big).ln() + g * g / big);
        assert!((with - own - base).abs() < 1e-6);
    }

    #[test]
    fn interpolates_with_tiny_noise() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.5]]);
        let y = vec![0.5, -0.3, 1.2];
        let mut th = params(0.7, 1.0, 1e-12);
        th.mean_const = 0.1;
        let data = DerivativeDataset::new(
            x.clone(),
            y.clone(),
            None,
            None,
            Standardization::identity(1),
        )
        .unwrap();
        let m = ExactModel::from_dataset(&data, th, false, 10).unwrap();
        let p = m.posterior(&x, false).unwrap();
        for (a, b) in p.mean.iter().zip(&y) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let data = sample_dataset(TestFunction::Branin, 20, 0.0, 0.0, 2).unwrap();
        let mut th = RbfParams::isotropic(2, 0.2, 1.7);
        th.mean_const = 0.4;
        let m = ExactModel::from_dataset(&data, th.clone(), true, 500).unwrap();
        let q = Matrix::from_rows(&[vec![3.0, 3.0], vec![-2.5, 0.5]]);
        let p = m.posterior(&q, true).unwrap();
        for i in 0..2 {
            assert!((p.mean[i] - 0.4).abs() < 1e-6);
            assert!((p.var_f[i] - 1.7).abs() < 1e-6);
        }
        let g = p.gradients.unwrap();
        assert!(g.mean.max_abs() < 1e-6);
        assert!((g.var_f[(0, 0)] - 1.7 / 0.04).abs() < 1e-6);
    }

    #[test]
    fn variance_is_bounded_by_prior() {
        let data = sample_dataset(TestFunction::SixHumpCamel, 30, 0.05, 0.05, 3).unwrap();
        let th = RbfParams::isotropic(2, 0.3, 1.2);
        let m = ExactModel::from_dataset(&data, th, true, 500).unwrap();
        let q = Matrix::from_fn(200, 2, |i, j| {
            ((i * 37 + j * 11) % 101) as f64 / 100.0 * 1.4 - 0.2
        });
        let p = m.posterior(&q, false).unwrap();
        assert!(p.var_f.iter().all(|&v| (0.0..=1.2 + 1e-8).contains(&v)));
    }

    #[test]
    fn permutation_invariant() {
        let data = sample_dataset(TestFunction::Branin, 15, 0.1, 0.1, 4).unwrap();
        let th = RbfParams::isotropic(2, 0.4, 1.0);
        let a = ExactModel::from_dataset(&data, th.clone(), true, 500).unwrap();
        let perm: Vec<usize> = (0..15).map(|i| (i * 7) % 15).collect();
        let b = ExactModel::from_dataset(&data.subset(&perm).unwrap(), th, true, 500).unwrap();
        assert!((a.log_marginal_likelihood() - b.log_marginal_likelihood()).abs() < 1e-10);
    }

    #[test]
    fn cap_is_enforced() {
        let data = sample_dataset(TestFunction::Branin, 10, 0.1, 0.1, 4).unwrap();
        let th = RbfParams::isotropic(2, 0.4, 1.0);
        assert!(matches!(
            ExactModel::from_dataset(&data, th, true, 29),
            Err(Error::CapExceeded { rows: 30, cap: 29 })
        ));
    }

    #[test]
    fn tape_lml_matches_closed_form_and_gradients() {
        let data = sample_dataset(TestFunction::Branin, 6, 0.1, 0.1, 5).unwrap();
        let mut th = RbfParams::isotropic(2, 0.4, 1.3);
        th.mean_const = 0.2;
        th.noise_label = 0.03;
        th.noise_grad = 0.05;
        let (obs, targets) = data.observations(true);
        let closed = ExactModel::new(
            data.x().clone(),
            obs.clone(),
            targets.clone(),
            th.clone(),
            100,
        )
        .unwrap()
        .log_marginal_likelihood();
        let raw = RawTheta::from_params(&th);
        let tape = Tape::new();
        let v = raw.record(&tape);
        let lml = log_marginal_likelihood_var(&tape, data.x(), &obs, &targets, &v, 0.0).unwrap();
        assert!((lml.item() - closed).abs() < 1e-9);

        let at: Vec<f64> = raw
            .as_vec()
            .iter()
            .flat_map(|m| m.as_slice().to_vec())
            .collect();
        let rep = fd_check(
            |tape, p| {
                let seg = |s, r| crate::autodiff::segment(p, s, r, 1);
                let vars = ThetaVars::from_leaves([
                    seg(0, 2)?,
                    seg(2, 1)?,
                    seg(3, 1)?,
                    seg(4, 1)?,
                    seg(5, 1)?,
                ]);
                log_marginal_likelihood_var(tape, data.x(), &obs, &targets, &vars, 0.0)
            },
            &at,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn derivatives_improve_branin_rmse() {
        let train = sample_dataset(TestFunction::Branin, 100, 0.0, 0.0, 10).unwrap();
        let test = crate::data::sample_raw(TestFunction::Branin, 1000, 0.0, 0.0, 11)
            .unwrap()
            .restandardized(train.standardization())
            .unwrap();
        let init = RbfParams {
            lengthscales: vec![0.3, 0.3],
            outputscale: 1.0,
            mean_const: 0.0,
            noise_label: 1e-3,
            noise_grad: 1e-3,
        };
        let rmse = |use_derivatives: bool| {
            let cfg = ExactFitConfig {
                iterations: 150,
                use_derivatives,
                ..Default::default()
            };
            let (m, trace) = fit(&train, &init, &cfg).unwrap();
            assert!(trace.last().unwrap() < &trace[0]);
            let p = m.posterior(test.x(), false).unwrap();
            crate::posterior::nll_rmse_from(&p.mean, &p.var_y, test.y()).1
        };
        let with = rmse(true);
        let without = rmse(false);
        assert!(with < without, "with {with} vs without {without}");
    }
}
