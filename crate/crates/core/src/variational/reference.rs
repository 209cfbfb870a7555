//! Unwhitened variational GP with full inducing derivatives.
//!
//! Built directly from `k_nabla_block` in the natural point-major order
//! `[f(z₀), ∂₁f(z₀), …, ∂_D f(z₀), f(z₁), …]`. It exists only to check the
//! whitened directional path in the canonical case `Vᵢ = I`.

use crate::error::{Error, Result};
use crate::kernels::{k_nabla_block, ObsKind, Observation, RbfParams};
use crate::linalg::{cholesky_with_jitter, log_det, CholeskyFactor, Matrix};

use super::{BatchItem, InducingState, LossKind};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub struct FullDerivativeReference {
    z: Matrix,
    theta: RbfParams,
    mean: Vec<f64>,
    cov: Matrix,
    prior: CholeskyFactor,
}

/// Natural index of `(point, c)` (c = 0 for the value) to augmented index.
fn augmented_index(natural: usize, m: usize, d: usize) -> usize {
    let (pt, c) = (natural / (d + 1), natural % (d + 1));
    if c == 0 {
        pt
    } else {
        m + pt * d + (c - 1)
    }
}

impl FullDerivativeReference {
    /// Maps a canonical whitened state to `(m, S)` over the natural ordering.
    pub fn from_whitened(state: &InducingState, theta: &RbfParams, jitter: f64) -> Result<Self> {
        let (m, d) = (state.num_points(), state.dim());
        let canonical = crate::kernels::DirectionSet::canonical(m, d);
        if state.directions != canonical {
            return Err(Error::InvalidConfig(
                "reference path needs canonical directions with p = D".into(),
            ));
        }
        let q = m * (d + 1);
        let mut k_nat = Matrix::zeros(q, q);
        for a in 0..m {
            for b in 0..m {
                let blk = k_nabla_block(state.z.row_slice(a), state.z.row_slice(b), theta)?;
                for i in 0..=d {
                    for j in 0..=d {
                        k_nat[(a * (d + 1) + i, b * (d + 1) + j)] = blk[(i, j)];
                    }
                }
            }
        }
        let mut natural_of = vec![0; q];
        for n in 0..q {
            natural_of[augmented_index(n, m, d)] = n;
        }
        let k_aug = Matrix::from_fn(q, q, |i, j| k_nat[(natural_of[i], natural_of[j])]);
        let lz = cholesky_with_jitter(&k_aug, jitter)?;
        k_nat.add_diagonal(lz.jitter_used);
        let m_aug = lz.lower.matmul(&Matrix::column(state.m_bar.clone()))?;
        let t = lz.lower.matmul(&state.l_bar)?;
        let s_aug = t.matmul_t(&t)?;
        let mean = (0..q)
            .map(|n| m_aug[(augmented_index(n, m, d), 0)])
            .collect();
        let cov = Matrix::from_fn(q, q, |a, b| {
            s_aug[(augmented_index(a, m, d), augmented_index(b, m, d))]
        });
        let prior = cholesky_with_jitter(&k_nat, 0.0)?;
        Ok(Self {
            z: state.z.clone(),
            theta: theta.clone(),
            mean,
            cov,
            prior,
        })
    }

    fn cross(&self, x: &Matrix, obs: &[Observation]) -> Result<Matrix> {
        let (m, d) = self.z.shape();
        let mut k = Matrix::zeros(obs.len(), m * (d + 1));
        for (r, o) in obs.iter().enumerate() {
            let a = match o.kind {
                ObsKind::Label => 0,
                ObsKind::Partial(j) => j + 1,
            };
            for pt in 0..m {
                let blk = k_nabla_block(x.row_slice(o.point), self.z.row_slice(pt), &self.theta)?;
                for c in 0..=d {
                    k[(r, pt * (d + 1) + c)] = blk[(a, c)];
                }
            }
        }
        Ok(k)
    }

    /// Latent mean and variance per observation row.
    pub fn moments(&self, x: &Matrix, obs: &[Observation]) -> Result<(Vec<f64>, Vec<f64>)> {
        let kxu = self.cross(x, obs)?;
        // A = K_xu K⁻¹, computed as (K⁻¹ K_ux)ᵀ
        let a = self.prior.solve(&kxu.transpose())?.transpose();
        let mean_f = a.matmul(&Matrix::column(self.mean.clone()))?;
        let a_s = a.matmul(&self.cov)?;
        let w = self.theta.precisions();
        let mut mean = Vec::with_capacity(obs.len());
        let mut var = Vec::with_capacity(obs.len());
        for (r, o) in obs.iter().enumerate() {
            let (kdiag, mu) = match o.kind {
                ObsKind::Label => (self.theta.outputscale, self.theta.mean_const),
                ObsKind::Partial(j) => (self.theta.outputscale * w[j], 0.0),
            };
            let qrow: f64 = a
                .row_slice(r)
                .iter()
                .zip(kxu.row_slice(r))
                .map(|(u, v)| u * v)
                .sum();
            let srow: f64 = a_s
                .row_slice(r)
                .iter()
                .zip(a.row_slice(r))
                .map(|(u, v)| u * v)
                .sum();
            mean.push(mean_f[(r, 0)] + mu);
            var.push(kdiag - qrow + srow);
        }
        Ok((mean, var))
    }

    /// `KL(N(m, S) ‖ N(0, K))`.
    pub fn kl(&self) -> Result<f64> {
        let q = self.mean.len() as f64;
        let kinv_s = self.prior.solve(&self.cov)?;
        let kinv_m = self.prior.solve_vec(&self.mean)?;
        let quad: f64 = self.mean.iter().zip(&kinv_m).map(|(a, b)| a * b).sum();
        let s_factor = cholesky_with_jitter(&self.cov, 0.0)?;
        Ok(0.5 * (kinv_s.trace() + quad - q + log_det(&self.prior) - log_det(&s_factor)))
    }

    /// Full-batch objective (all rows weight 1).
    pub fn elbo(&self, x: &Matrix, batch: &[BatchItem], kind: LossKind) -> Result<f64> {
        let obs: Vec<Observation> = batch
            .iter()
            .map(|b| Observation {
                point: b.point,
                kind: b.kind,
            })
            .collect();
        let (mean, var) = self.moments(x, &obs)?;
        let mut total = 0.0;
        for (r, b) in batch.iter().enumerate() {
            let noise = self.theta.noise_for(b.kind);
            let resid2 = (b.target - mean[r]).powi(2);
            total += match kind {
                LossKind::Elbo => -0.5 * (LN_2PI + noise.ln() + (resid2 + var[r]) / noise),
                LossKind::Ppgpr => {
                    let v = noise + var[r];
                    -0.5 * (LN_2PI + v.ln() + resid2 / v)
                }
            };
        }
        Ok(total - self.kl()?)
    }
}
