//! Adam with a multi-step learning-rate schedule, and the softplus
//! parameterization of kernel hyperparameters.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::kernels::RbfParams;
use crate::linalg::Matrix;

/// Added to softplus-transformed noise variances.
pub const NOISE_FLOOR: f64 = 1e-6;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Adam over a list of parameter matrices. Minimizes.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(params: &[Matrix]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            for (i, (pi, gi)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *pi -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Learning rate multiplied by `gamma` at each milestone epoch.
#[derive(Clone, Debug)]
pub struct MultiStep {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl MultiStep {
    /// Halves the rate at 50% and 75% of `epochs`.
    pub fn halving(base: f64, epochs: usize) -> Self {
        Self {
            base,
            milestones: vec![epochs / 2, epochs * 3 / 4],
            gamma: 0.5,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| m > 0 && epoch >= m)
            .count();
        self.base * self.gamma.powi(passed as i32)
    }
}

/// Unconstrained leaves for [`RbfParams`]: softplus of lengthscales (D×1),
/// outputscale, noises, and the raw constant mean.
#[derive(Clone, Debug)]
pub struct RawTheta {
    pub lengthscales: Matrix,
    pub outputscale: Matrix,
    pub mean_const: Matrix,
    pub noise_label: Matrix,
    pub noise_grad: Matrix,
}

/// Constrained hyperparameters as tape variables.
#[derive(Clone, Copy)]
pub struct ThetaVars<'t> {
    pub lengthscales: Var<'t>,
    pub outputscale: Var<'t>,
    pub mean_const: Var<'t>,
    pub noise_label: Var<'t>,
    pub noise_grad: Var<'t>,
    pub leaves: [Var<'t>; 5],
}

impl RawTheta {
    pub fn from_params(theta: &RbfParams) -> Self {
        let noise = |v: f64| Matrix::scalar(inv_softplus((v - NOISE_FLOOR).max(1e-12)));
        Self {
            lengthscales: Matrix::column(
                theta
                    .lengthscales
                    .iter()
                    .map(|&l| inv_softplus(l))
                    .collect(),
            ),
            outputscale: Matrix::scalar(inv_softplus(theta.outputscale)),
            mean_const: Matrix::scalar(theta.mean_const),
            noise_label: noise(theta.noise_label),
            noise_grad: noise(theta.noise_grad),
        }
    }

    pub fn to_params(&self) -> RbfParams {
        RbfParams {
            lengthscales: self
                .lengthscales
                .as_slice()
                .iter()
                .map(|&r| softplus(r))
                .collect(),
            outputscale: softplus(self.outputscale[(0, 0)]),
            mean_const: self.mean_const[(0, 0)],
            noise_label: softplus(self.noise_label[(0, 0)]) + NOISE_FLOOR,
            noise_grad: softplus(self.noise_grad[(0, 0)]) + NOISE_FLOOR,
        }
    }

    pub fn as_vec(&self) -> Vec<Matrix> {
        vec![
            self.lengthscales.clone(),
            self.outputscale.clone(),
            self.mean_const.clone(),
            self.noise_label.clone(),
            self.noise_grad.clone(),
        ]
    }

    pub fn from_vec(mut v: Vec<Matrix>) -> Self {
        let noise_grad = v.pop().expect("5 leaves");
        let noise_label = v.pop().expect("5 leaves");
        let mean_const = v.pop().expect("5 leaves");
        let outputscale = v.pop().expect("5 leaves");
        let lengthscales = v.pop().expect("5 leaves");
        Self {
            lengthscales,
            outputscale,
            mean_const,
            noise_label,
            noise_grad,
        }
    }

    pub fn record<'t>(&self, tape: &'t Tape) -> ThetaVars<'t> {
        let leaves = [
            tape.leaf(self.lengthscales.clone()),
            tape.leaf(self.outputscale.clone()),
            tape.leaf(self.mean_const.clone()),
            tape.leaf(self.noise_label.clone()),
            tape.leaf(self.noise_grad.clone()),
        ];
        ThetaVars::from_leaves(leaves)
    }
}

impl<'t> ThetaVars<'t> {
    /// Applies the constraining transforms to five raw leaves.
    pub fn from_leaves(leaves: [Var<'t>; 5]) -> Self {
        let floor = |v: Var<'t>| {
            let t = v.tape();
            v.softplus()
                .add(t.scalar(NOISE_FLOOR))
                .expect("scalar shapes agree")
        };
        Self {
            lengthscales: leaves[0].softplus(),
            outputscale: leaves[1].softplus(),
            mean_const: leaves[2],
            noise_label: floor(leaves[3]),
            noise_grad: floor(leaves[4]),
            leaves,
        }
    }

    /// Per-row noise variances (n×1) for rows flagged as labels or partials.
    pub fn row_noise(&self, is_label: &[bool]) -> Result<Var<'t>> {
        let tape = self.noise_label.tape();
        let lab = Matrix::column(
            is_label
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        );
        let par = Matrix::column(
            is_label
                .iter()
                .map(|&b| if b { 0.0 } else { 1.0 })
                .collect(),
        );
        tape.leaf(lab)
            .mul_scalar(self.noise_label)?
            .add(tape.leaf(par).mul_scalar(self.noise_grad)?)
    }

    /// Prior mean per row: `μ₀` on labels, 0 on partials.
    pub fn row_mean(&self, is_label: &[bool]) -> Result<Var<'t>> {
        let tape = self.mean_const.tape();
        let lab = Matrix::column(
            is_label
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        );
        tape.leaf(lab).mul_scalar(self.mean_const)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_round_trip() {
        for y in [1e-8, 0.3, 1.0, 5.0, 40.0] {
            assert!((softplus(inv_softplus(y)) - y).abs() <= 1e-12 * y.max(1.0) + 1e-20);
        }
        assert!((inv_softplus(1.0) - (std::f64::consts::E - 1.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn raw_theta_round_trip() {
        let th = RbfParams {
            lengthscales: vec![0.2, 1.5],
            outputscale: 2.0,
            mean_const: -0.3,
            noise_label: 0.01,
            noise_grad: 0.05,
        };
        let back = RawTheta::from_params(&th).to_params();
        for (a, b) in th.lengthscales.iter().zip(&back.lengthscales) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((back.noise_label - 0.01).abs() < 1e-12);
        assert!((back.noise_grad - 0.05).abs() < 1e-12);
        assert_eq!(back.mean_const, -0.3);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![Matrix::column(vec![3.0, -2.0])];
        let mut opt = Adam::new(&p);
        for _ in 0..2000 {
            let g = vec![p[0].scale(2.0)];
            opt.step(&mut p, &g, 0.05);
        }
        assert!(p[0].max_abs() < 1e-3);
    }

    #[test]
    fn schedule_halves_at_milestones() {
        let s = MultiStep::halving(0.01, 200);
        assert_eq!(s.lr(0), 0.01);
        assert_eq!(s.lr(99), 0.01);
        assert_eq!(s.lr(100), 0.005);
        assert_eq!(s.lr(150), 0.0025);
        assert_eq!(MultiStep::halving(0.01, 1).lr(0), 0.01);
    }
}
