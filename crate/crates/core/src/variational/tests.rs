use super::reference::FullDerivativeReference;
use super::*;
use crate::data::{sample_dataset, TestFunction};
use crate::diagnostics::random_state;
use crate::exact_gp::ExactModel;
use crate::kernels::assemble_kzz_bar;
use crate::linalg::cholesky_with_jitter;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn theta2() -> RbfParams {
    RbfParams {
        lengthscales: vec![0.4, 0.6],
        outputscale: 1.3,
        mean_const: 0.15,
        noise_label: 0.05,
        noise_grad: 0.08,
    }
}

#[test]
fn init_shapes_and_determinism() {
    let data = sample_dataset(TestFunction::Sin5, 30, 0.0, 0.0, 1).unwrap();
    let s0 = init_inducing(&data, 7, 0, 3).unwrap();
    assert_eq!(s0.per_point(), 0);
    assert_eq!(s0.m_bar.len(), 7);
    assert_eq!(s0.directions.directions.rows(), 0);

    let s2 = init_inducing(&data, 6, 2, 3).unwrap();
    assert_eq!(s2.size(), 18);
    for pt in 0..6 {
        let (a, b) = (
            s2.directions.direction(pt, 0),
            s2.directions.direction(pt, 1),
        );
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum();
        assert!(dot.abs() < 1e-12);
        assert!((na - 1.0).abs() < 1e-12);
    }
    assert_eq!(s2, init_inducing(&data, 6, 2, 3).unwrap());
    assert_ne!(s2, init_inducing(&data, 6, 2, 4).unwrap());
    assert!(init_inducing(&data, 31, 0, 3).is_err());
    assert_eq!(s2.l_bar, Matrix::identity(18));
    assert_eq!(s2.kl(), 0.0);
}

#[test]
fn whitened_prior_reproduces_gp_prior() {
    let data = sample_dataset(TestFunction::Branin, 20, 0.0, 0.0, 2).unwrap();
    let state = init_inducing(&data, 5, 2, 1).unwrap();
    let th = theta2();
    let (obs, _) = data.observations(true);
    let p = predictive_moments(&state, &th, data.x(), &obs, 1e-8).unwrap();
    let w = th.precisions();
    for (r, o) in obs.iter().enumerate() {
        let (m, v) = match o.kind {
            ObsKind::Label => (th.mean_const, th.outputscale),
            ObsKind::Partial(j) => (0.0, th.outputscale * w[j]),
        };
        assert!((p.mean[r] - m).abs() < 1e-10);
        assert!((p.var_f[r] - v).abs() < 1e-10 * v.max(1.0));
    }
    let items = batch_items(&data, true);
    let e = elbo_minibatch(&state, &th, data.x(), &items, 20, 40, LossKind::Elbo, 1e-8).unwrap();
    assert!(e.kl.abs() < 1e-12);
}

#[test]
fn canonical_directions_match_full_derivative_reference() {
    let data = sample_dataset(TestFunction::Branin, 50, 0.05, 0.05, 7).unwrap();
    let base = init_inducing_with(&data, 8, 2, 5, DirectionInit::Canonical).unwrap();
    let th = theta2();
    let items = batch_items(&data, true);
    let obs: Vec<Observation> = items
        .iter()
        .map(|b| Observation {
            point: b.point,
            kind: b.kind,
        })
        .collect();
    for seed in 0..3 {
        let state = random_state(&base, seed, 1.0);
        let r = FullDerivativeReference::from_whitened(&state, &th, 1e-8).unwrap();
        let (rm, rv) = r.moments(data.x(), &obs).unwrap();
        let p = predictive_moments(&state, &th, data.x(), &obs, 1e-8).unwrap();
        for i in 0..obs.len() {
            assert!((p.mean[i] - rm[i]).abs() <= 1e-8 * rm[i].abs().max(1.0));
            assert!((p.var_f[i] - rv[i]).abs() <= 1e-8 * rv[i].abs().max(1.0));
        }
        for kind in [LossKind::Elbo, LossKind::Ppgpr] {
            let ours = elbo_minibatch(&state, &th, data.x(), &items, 50, 100, kind, 1e-8).unwrap();
            let theirs = r.elbo(data.x(), &items, kind).unwrap();
            assert!(
                (ours.elbo - theirs).abs() <= 1e-8 * theirs.abs(),
                "{ours:?} vs {theirs}"
            );
        }
    }
}

#[test]
fn interpolates_through_inducing_values() {
    let data = sample_dataset(TestFunction::SixHumpCamel, 30, 0.0, 0.0, 3).unwrap();
    let mut state = init_inducing(&data, 6, 1, 2).unwrap();
    let th = theta2();
    let q = state.size();
    let kzz = assemble_kzz_bar(&state.z, &state.directions, &th).unwrap();
    let lz = cholesky_with_jitter(&kzz, 1e-8).unwrap();
    let targets: Vec<f64> = (0..q).map(|i| (i as f64 * 0.7).sin()).collect();
    state.m_bar = crate::linalg::solve_triangular(&lz, &Matrix::column(targets.clone()), false)
        .unwrap()
        .into_vec();
    state.l_bar = Matrix::identity(q).scale(1e-6);
    let obs: Vec<Observation> = (0..6)
        .map(|k| Observation {
            point: k,
            kind: ObsKind::Label,
        })
        .collect();
    let p = predictive_moments(&state, &th, &state.z, &obs, 1e-8).unwrap();
    // labels come first in the augmented ordering
    for (k, t) in targets.iter().take(6).enumerate() {
        assert!((p.mean[k] - th.mean_const - t).abs() < 1e-6);
        assert!(p.var_f[k] < 1e-6);
    }
}

/// Textbook unwhitened SVGP objective written with nalgebra.
fn dense_svgp_elbo(state: &InducingState, th: &RbfParams, x: &Matrix, y: &[f64]) -> f64 {
    let kf = |a: &[f64], b: &[f64]| crate::kernels::k(a, b, th).unwrap();
    let m = state.num_points();
    let n = y.len();
    let kzz = DMatrix::from_fn(m, m, |i, j| kf(state.z.row_slice(i), state.z.row_slice(j)));
    let kxz = DMatrix::from_fn(n, m, |i, j| kf(x.row_slice(i), state.z.row_slice(j)));
    let lz = kzz.clone().cholesky().unwrap().l();
    let lbar = DMatrix::from_row_slice(m, m, state.l_bar.as_slice());
    let mu = &lz * DVector::from_row_slice(&state.m_bar);
    let s = &lz * &lbar * lbar.transpose() * lz.transpose();
    let kinv = kzz.clone().try_inverse().unwrap();
    let a = &kxz * &kinv;
    let mean = &a * &mu;
    let mut total = 0.0;
    for i in 0..n {
        let ai = a.row(i);
        let qii = (ai * kxz.row(i).transpose())[(0, 0)];
        let sii = (ai * &s * ai.transpose())[(0, 0)];
        let var = th.outputscale - qii + sii;
        let r = y[i] - th.mean_const - mean[i];
        let s2 = th.noise_label;
        total +=
            -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - r * r / (2.0 * s2) - var / (2.0 * s2);
    }
    let kl = 0.5
        * ((&kinv * &s).trace() + (mu.transpose() * &kinv * &mu)[(0, 0)] - m as f64
            + kzz.determinant().ln()
            - s.determinant().ln());
    total - kl
}

#[test]
fn plain_svgp_matches_dense_oracle() {
    let data = sample_dataset(TestFunction::Branin, 25, 0.1, 0.1, 9)
        .unwrap()
        .without_derivatives();
    let base = init_inducing(&data, 6, 0, 4).unwrap();
    let th = theta2();
    for seed in 0..3 {
        let state = random_state(&base, seed, 1.0);
        let ours = elbo_full(&state, &th, &data, false, LossKind::Elbo, 1e-8).unwrap();
        let oracle = dense_svgp_elbo(&state, &th, data.x(), data.y());
        assert!(
            (ours.elbo - oracle).abs() <= 1e-8 * oracle.abs().max(1.0),
            "{} vs {oracle}",
            ours.elbo
        );
    }
}

#[test]
fn elbo_bounds_exact_log_marginal_likelihood() {
    let data = sample_dataset(TestFunction::Branin, 40, 0.05, 0.05, 10).unwrap();
    let th = theta2();
    let exact = ExactModel::from_dataset(&data, th.clone(), true, 500)
        .unwrap()
        .log_marginal_likelihood();
    let base = init_inducing(&data, 10, 1, 3).unwrap();
    for seed in 0..5 {
        let state = random_state(&base, seed, 2.0);
        let e = elbo_full(&state, &th, &data, true, LossKind::Elbo, 1e-8).unwrap();
        assert!(e.elbo <= exact + 1e-6, "{} > {exact}", e.elbo);
        assert!(e.kl >= -1e-10);
    }
}

#[test]
fn kl_is_nonnegative() {
    let data = sample_dataset(TestFunction::Branin, 20, 0.0, 0.0, 1).unwrap();
    let base = init_inducing(&data, 5, 2, 1).unwrap();
    for seed in 0..20 {
        assert!(random_state(&base, seed, 3.0).kl() >= -1e-10);
    }
}

#[test]
fn minibatch_estimate_is_unbiased() {
    let data = sample_dataset(TestFunction::Hartmann6, 60, 0.1, 0.1, 2).unwrap();
    let data = data.subset(&(0..60).collect::<Vec<_>>()).unwrap();
    let state = random_state(&init_inducing(&data, 6, 1, 1).unwrap(), 3, 1.0);
    let mut th = default_theta(6);
    th.noise_grad = 0.5;
    let items = batch_items(&data, true);
    let n = items.len();
    let full = elbo_minibatch(
        &state,
        &th,
        data.x(),
        &items,
        60,
        n - 60,
        LossKind::Elbo,
        1e-8,
    )
    .unwrap()
    .data_term;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let reps = 400;
    let mut vals = Vec::with_capacity(reps);
    for _ in 0..reps {
        let picked: Vec<BatchItem> = rand::seq::index::sample(&mut rng, n, 16)
            .into_iter()
            .map(|i| items[i])
            .collect();
        vals.push(
            elbo_minibatch(
                &state,
                &th,
                data.x(),
                &picked,
                60,
                n - 60,
                LossKind::Elbo,
                1e-8,
            )
            .unwrap()
            .data_term,
        );
    }
    let mean = vals.iter().sum::<f64>() / reps as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    let se = sd / (reps as f64).sqrt();
    assert!(
        (mean - full).abs() <= 3.0 * se,
        "{mean} vs {full} (se {se})"
    );
}

#[test]
fn objective_gradients_match_finite_differences() {
    for kind in [LossKind::Elbo, LossKind::Ppgpr] {
        let err = crate::diagnostics::objective_gradient_fd(kind, 5).unwrap();
        println!("{kind:?}: {err:e}");
        assert!(err <= 1e-4, "{kind:?}: {err}");
    }
}

fn toy_1d(n: usize, seed: u64) -> DerivativeDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(n, 1, |_, _| rng.random_range(0.0..1.0));
    let y = (0..n)
        .map(|i| (6.0 * x[(i, 0)]).sin() + 0.05 * rng.random_range(-1.0..1.0))
        .collect();
    let dy = Matrix::from_fn(n, 1, |i, _| 6.0 * (6.0 * x[(i, 0)]).cos());
    DerivativeDataset::new(x, y, Some(dy), None, Standardization::identity(1)).unwrap()
}

#[test]
fn training_reduces_negative_elbo() {
    let data = toy_1d(200, 1);
    let cfg = TrainingConfig {
        num_inducing: 10,
        directions_per_point: 1,
        batch_size: 64,
        epochs: 200,
        learning_rate: 0.01,
        seed: 3,
        use_derivatives: true,
        ..Default::default()
    };
    let init = init_inducing(&data, 10, 1, 3).unwrap();
    let before = -elbo_full(&init, &default_theta(1), &data, true, LossKind::Elbo, 1e-8)
        .unwrap()
        .elbo;
    let out = train(&data, &cfg).unwrap();
    let after = -elbo_full(&out.state, &out.theta, &data, true, LossKind::Elbo, 1e-8)
        .unwrap()
        .elbo;
    assert!(after <= before - 0.2 * before.abs(), "{before} -> {after}");
    assert_eq!(out.loss_trace.len(), 200);
    for pt in 0..10 {
        let v = out.state.directions.direction(pt, 0);
        assert!((v[0].abs() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn training_is_deterministic() {
    let data = toy_1d(60, 2);
    let cfg = TrainingConfig {
        num_inducing: 5,
        directions_per_point: 1,
        batch_size: 16,
        epochs: 5,
        seed: 9,
        use_derivatives: true,
        loss: LossKind::Ppgpr,
        ..Default::default()
    };
    let a = train(&data, &cfg).unwrap();
    let b = train(&data, &cfg).unwrap();
    assert_eq!(a.loss_trace, b.loss_trace);
    assert_eq!(a.state, b.state);
}

#[test]
fn label_only_training_ignores_gradients() {
    let data = toy_1d(60, 4);
    let cfg = TrainingConfig {
        num_inducing: 5,
        batch_size: 16,
        epochs: 5,
        seed: 2,
        use_derivatives: false,
        ..Default::default()
    };
    let reads = data.gradient_reads();
    let a = train(&data, &cfg).unwrap();
    assert_eq!(data.gradient_reads(), reads);
    let b = train(&data.without_derivatives(), &cfg).unwrap();
    assert_eq!(a.loss_trace, b.loss_trace);
    assert_eq!(a.theta, b.theta);
}

#[test]
fn fixed_directions_stay_fixed() {
    let data = sample_dataset(TestFunction::Branin, 30, 0.0, 0.0, 2).unwrap();
    let cfg = TrainingConfig {
        num_inducing: 4,
        directions_per_point: 2,
        batch_size: 16,
        epochs: 2,
        use_derivatives: true,
        learn_directions: false,
        direction_init: DirectionInit::Canonical,
        ..Default::default()
    };
    let out = train(&data, &cfg).unwrap();
    assert_eq!(out.state.directions, DirectionSet::canonical(4, 2));
}

#[test]
fn metrics_and_checkpoint_round_trip() {
    let data = sample_dataset(TestFunction::Branin, 40, 0.0, 0.0, 3).unwrap();
    let cfg = TrainingConfig {
        num_inducing: 8,
        directions_per_point: 1,
        batch_size: 32,
        epochs: 3,
        use_derivatives: true,
        ..Default::default()
    };
    let out = train(&data, &cfg).unwrap();
    let m = nll_rmse(&out.state, &out.theta, &data, 1e-8).unwrap();
    assert!(m.nll.is_finite() && m.rmse.is_finite());
    assert!(m.grad_rmse.is_some());
    let ck = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        model: "dsvgp".into(),
        config: cfg,
        theta: out.theta.clone(),
        state: out.state.clone(),
        standardization: data.standardization().clone(),
    };
    let dir = std::env::temp_dir().join(format!("dirgp-ck-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.json");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

#[test]
fn empty_batch_rejected() {
    let data = sample_dataset(TestFunction::Branin, 10, 0.0, 0.0, 3).unwrap();
    let state = init_inducing(&data, 3, 0, 1).unwrap();
    assert!(matches!(
        elbo_minibatch(
            &state,
            &theta2(),
            data.x(),
            &[],
            10,
            0,
            LossKind::Elbo,
            1e-8
        ),
        Err(Error::EmptyBatch)
    ));
}
