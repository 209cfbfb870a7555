//! Named model families, fitting, and prediction behind one interface.
//!
//! Names follow the usual table conventions: `svgp`/`ppgpr` see labels only,
//! `gradsvgp`/`gradppgpr` use full inducing derivatives (`p = D`, fixed
//! canonical directions), `dsvgp`/`dppgpr` use `p` learned directions per
//! inducing point, and `exact`/`gradgp` are exact GPs without/with gradients.

use serde::{Deserialize, Serialize};

use crate::data::DerivativeDataset;
use crate::error::{Error, Result};
use crate::exact_gp::{self, ExactFitConfig, ExactModel};
use crate::kernels::RbfParams;
use crate::linalg::Matrix;
use crate::posterior::PosteriorMoments;
use crate::variational::{
    self, default_theta, test_metrics, DirectionInit, InducingState, LossKind, Metrics,
    TrainingConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Svgp,
    Ppgpr,
    GradSvgp,
    GradPpgpr,
    Dsvgp,
    Dppgpr,
    Exact,
    GradGp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        ModelKind::Svgp,
        ModelKind::Ppgpr,
        ModelKind::GradSvgp,
        ModelKind::GradPpgpr,
        ModelKind::Dsvgp,
        ModelKind::Dppgpr,
        ModelKind::Exact,
        ModelKind::GradGp,
    ];

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model `{name}`")))
    }

    /// Parses `dsvgp2`-style tokens: a model name with an optional `p` suffix.
    pub fn parse_token(token: &str) -> Result<(Self, Option<usize>)> {
        let digits = token.len() - token.trim_end_matches(|c: char| c.is_ascii_digit()).len();
        let (name, p) = token.split_at(token.len() - digits);
        let p = if p.is_empty() {
            None
        } else {
            Some(
                p.parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad model `{token}`")))?,
            )
        };
        Ok((Self::from_name(name)?, p))
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Svgp => "svgp",
            ModelKind::Ppgpr => "ppgpr",
            ModelKind::GradSvgp => "gradsvgp",
            ModelKind::GradPpgpr => "gradppgpr",
            ModelKind::Dsvgp => "dsvgp",
            ModelKind::Dppgpr => "dppgpr",
            ModelKind::Exact => "exact",
            ModelKind::GradGp => "gradgp",
        }
    }

    pub fn uses_derivatives(&self) -> bool {
        !matches!(self, ModelKind::Svgp | ModelKind::Ppgpr | ModelKind::Exact)
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, ModelKind::Exact | ModelKind::GradGp)
    }

    /// Only the directional models take a user-chosen `p`.
    pub fn takes_p(&self) -> bool {
        matches!(self, ModelKind::Dsvgp | ModelKind::Dppgpr)
    }

    pub fn loss(&self) -> LossKind {
        match self {
            ModelKind::Ppgpr | ModelKind::GradPpgpr | ModelKind::Dppgpr => LossKind::Ppgpr,
            _ => LossKind::Elbo,
        }
    }
}

/// A model family with its inducing budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Inducing points (ignored by exact models).
    pub num_inducing: usize,
    /// Directions per inducing point.
    pub p: usize,
}

impl ModelSpec {
    /// `p` defaults to 1 for directional models, `D` for the full-derivative
    /// ones and 0 otherwise; passing a nonzero `p` elsewhere is an error.
    pub fn new(kind: ModelKind, num_inducing: usize, p: Option<usize>, dim: usize) -> Result<Self> {
        let p = match (kind, p) {
            (k, Some(p)) if k.takes_p() => {
                if p == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "{} needs at least one direction (use svgp/ppgpr for p = 0)",
                        k.name()
                    )));
                }
                p
            }
            (k, None) if k.takes_p() => 1,
            (k, Some(p)) if p != 0 => {
                return Err(Error::InvalidConfig(format!(
                    "--p applies only to dsvgp/dppgpr, not {}",
                    k.name()
                )))
            }
            (ModelKind::GradSvgp | ModelKind::GradPpgpr, _) => dim,
            _ => 0,
        };
        if !kind.is_exact() && num_inducing == 0 {
            return Err(Error::InvalidConfig(
                "need at least one inducing point".into(),
            ));
        }
        Ok(Self {
            kind,
            num_inducing,
            p,
        })
    }

    /// Side length of the inducing covariance, `M(p+1)`.
    pub fn matrix_size(&self) -> usize {
        self.num_inducing * (self.p + 1)
    }

    /// Training settings for this family layered over `base`.
    pub fn training_config(&self, base: &TrainingConfig) -> TrainingConfig {
        let canonical = matches!(self.kind, ModelKind::GradSvgp | ModelKind::GradPpgpr);
        TrainingConfig {
            num_inducing: self.num_inducing,
            directions_per_point: self.p,
            loss: self.kind.loss(),
            use_derivatives: self.kind.uses_derivatives(),
            learn_directions: !canonical,
            direction_init: if canonical {
                DirectionInit::Canonical
            } else {
                DirectionInit::Random
            },
            ..base.clone()
        }
    }
}

/// Knobs for [`fit`]; the variational part is overridden per family.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub training: TrainingConfig,
    pub exact: ExactFitConfig,
    pub init_theta: Option<RbfParams>,
}

/// A trained model in the coordinates of the data it was fitted on.
#[derive(Clone, Debug)]
pub enum Fitted {
    Variational {
        state: InducingState,
        theta: RbfParams,
        jitter: f64,
    },
    Exact(ExactModel),
}

impl Fitted {
    pub fn theta(&self) -> &RbfParams {
        match self {
            Fitted::Variational { theta, .. } => theta,
            Fitted::Exact(m) => m.theta(),
        }
    }

    pub fn predict(&self, queries: &Matrix, with_gradients: bool) -> Result<PosteriorMoments> {
        match self {
            Fitted::Variational {
                state,
                theta,
                jitter,
            } => variational::predict(state, theta, queries, with_gradients, *jitter),
            Fitted::Exact(m) => m.posterior(queries, with_gradients),
        }
    }

    pub fn metrics(&self, test: &DerivativeDataset) -> Result<Metrics> {
        if test.is_empty() {
            return Err(Error::InvalidConfig("empty test set".into()));
        }
        let p = self.predict(test.x(), test.has_derivatives())?;
        Ok(test_metrics(&p, test))
    }
}

/// Trains `spec` on `data`. Derivative-blind families never touch the gradients.
pub fn fit(spec: &ModelSpec, data: &DerivativeDataset, opts: &FitOptions) -> Result<Fitted> {
    let init = opts
        .init_theta
        .clone()
        .unwrap_or_else(|| default_theta(data.dim()));
    if spec.kind.is_exact() {
        let cfg = ExactFitConfig {
            use_derivatives: spec.kind.uses_derivatives(),
            ..opts.exact.clone()
        };
        let (model, _) = exact_gp::fit(data, &init, &cfg)?;
        return Ok(Fitted::Exact(model));
    }
    let mut cfg = spec.training_config(&opts.training);
    cfg.init_theta = Some(init);
    let out = variational::train(data, &cfg)?;
    Ok(Fitted::Variational {
        state: out.state,
        theta: out.theta,
        jitter: cfg.jitter,
    })
}
