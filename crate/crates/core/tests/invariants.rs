//! Property tests for the declared invariants of the public types.

use dirgp::bo::{lcb, random_search};
use dirgp::data::{sample_dataset, sample_raw, TestFunction};
use dirgp::kernels::{assemble_kzz_bar, k_dir_block, k_nabla_block, DirectionSet, RbfParams};
use dirgp::linalg::cholesky_with_jitter;
use dirgp::posterior::PosteriorMoments;
use dirgp::variational::{elbo_full, init_inducing, train_from, LossKind, TrainingConfig};
use proptest::prelude::*;

fn any_function() -> impl Strategy<Value = TestFunction> {
    prop::sample::select(TestFunction::ALL.to_vec())
}

fn theta(dim: usize, ls: f64, scale: f64) -> RbfParams {
    RbfParams {
        lengthscales: vec![ls; dim],
        outputscale: scale,
        mean_const: 0.0,
        noise_label: 0.01,
        noise_grad: 0.01,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn standardization_round_trips(f in any_function(), n in 1usize..60, seed in 0u64..500) {
        let raw = sample_raw(f, n, 0.1, 0.1, seed).unwrap();
        let back = raw.standardize(Some(&f.bounds())).unwrap().destandardized();
        for i in 0..n {
            prop_assert!((back.y()[i] - raw.y()[i]).abs() <= 1e-12 * (1.0 + raw.y()[i].abs()));
            for j in 0..f.dim() {
                let (a, b) = (back.x()[(i, j)], raw.x()[(i, j)]);
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
                let (ga, gb) = (back.partial(i, j).unwrap(), raw.partial(i, j).unwrap());
                prop_assert!((ga - gb).abs() <= 1e-12 * (1.0 + gb.abs()));
            }
        }
    }

    #[test]
    fn standardized_targets_have_unit_moments(f in any_function(), n in 2usize..200, seed in 0u64..500) {
        let d = sample_dataset(f, n, 0.0, 0.0, seed).unwrap();
        let m = d.y().iter().sum::<f64>() / n as f64;
        let v = d.y().iter().map(|y| (y - m).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(m.abs() < 1e-10);
        prop_assert!((v - 1.0).abs() < 1e-10);
        prop_assert!(d.x().as_slice().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn mask_empty_iff_no_gradients(f in any_function(), seed in 0u64..100) {
        let d = sample_dataset(f, 10, 0.0, 0.0, seed).unwrap();
        prop_assert!(d.has_derivatives() && d.mask().iter().all(|&m| m));
        let bare = d.without_derivatives();
        prop_assert!(!bare.has_derivatives() && bare.mask().iter().all(|&m| !m));
        prop_assert_eq!(bare.num_partials(), 0);
    }

    #[test]
    fn gradient_block_is_symmetric_in_swap(
        d in 1usize..5,
        seed in 0u64..1000,
        ls in 0.2f64..3.0,
        scale in 0.1f64..4.0,
    ) {
        let mut rng = seed;
        let mut next = || { rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5 };
        let x: Vec<f64> = (0..d).map(|_| next()).collect();
        let y: Vec<f64> = (0..d).map(|_| next()).collect();
        let th = theta(d, ls, scale);
        let a = k_nabla_block(&x, &y, &th).unwrap();
        let b = k_nabla_block(&y, &x, &th).unwrap();
        for i in 0..=d {
            for j in 0..=d {
                prop_assert!((a[(i, j)] - b[(j, i)]).abs() <= 1e-12 * (1.0 + a[(i, j)].abs()));
            }
        }
    }

    #[test]
    fn canonical_direction_block_is_gradient_subblock(d in 1usize..5, j in 0usize..5, seed in 0u64..1000) {
        let j = j % d;
        let x: Vec<f64> = (0..d).map(|i| ((seed + i as u64) as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..d).map(|i| ((seed + 7 * i as u64) as f64 * 0.91).cos()).collect();
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        let th = theta(d, 0.8, 1.3);
        let full = k_nabla_block(&x, &y, &th).unwrap();
        let dir = k_dir_block(&x, &e, &y, &e, &th).unwrap();
        for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let (fa, fb) = (if a == 0 { 0 } else { j + 1 }, if b == 0 { 0 } else { j + 1 });
            prop_assert!((dir[(a, b)] - full[(fa, fb)]).abs() <= 1e-12 * (1.0 + full[(fa, fb)].abs()));
        }
    }

    #[test]
    fn inducing_covariance_is_positive_definite(m in 1usize..8, p in 0usize..3, seed in 0u64..500) {
        let data = sample_dataset(TestFunction::Hartmann6, 40, 0.0, 0.0, seed).unwrap();
        let state = init_inducing(&data, m, p, seed).unwrap();
        let k = assemble_kzz_bar(&state.z, &state.directions, &theta(6, 0.7, 1.0)).unwrap();
        prop_assert_eq!(k.rows(), m * (p + 1));
        let c = cholesky_with_jitter(&k, 1e-8).unwrap();
        prop_assert!((0..k.rows()).all(|i| c.lower[(i, i)] > 0.0));
    }

    #[test]
    fn training_keeps_unit_directions_and_positive_parameters(p in 1usize..3, seed in 0u64..200) {
        let data = sample_dataset(TestFunction::Branin, 30, 0.0, 0.0, seed).unwrap();
        let state = init_inducing(&data, 5, p, seed).unwrap();
        let cfg = TrainingConfig {
            num_inducing: 5,
            directions_per_point: p,
            batch_size: 16,
            epochs: 3,
            learning_rate: 0.1,
            seed,
            ..TrainingConfig::default()
        };
        let out = train_from(&data, &cfg, state, theta(2, 0.5, 1.0)).unwrap();
        for pt in 0..5 {
            for t in 0..p {
                let v = out.state.directions.direction(pt, t);
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-12);
            }
        }
        let th = &out.theta;
        prop_assert!(th.lengthscales.iter().all(|&l| l > 0.0));
        prop_assert!(th.outputscale > 0.0 && th.noise_label > 0.0 && th.noise_grad > 0.0);
        prop_assert!((0..out.state.l_bar.rows()).all(|i| out.state.l_bar[(i, i)] > 0.0));
        prop_assert!(out.loss_trace.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn p_zero_matches_label_only_svgp(m in 1usize..6, seed in 0u64..200) {
        let data = sample_dataset(TestFunction::SixHumpCamel, 25, 0.0, 0.0, seed).unwrap();
        let state = init_inducing(&data, m, 0, seed).unwrap();
        prop_assert_eq!(state.directions.clone(), DirectionSet::empty(m, 2));
        let th = theta(2, 0.6, 1.0);
        let with = elbo_full(&state, &th, &data.without_derivatives(), false, LossKind::Elbo, 1e-8).unwrap();
        let without = elbo_full(&state, &th, &data, false, LossKind::Elbo, 1e-8).unwrap();
        prop_assert!((with.elbo - without.elbo).abs() <= 1e-10 * (1.0 + with.elbo.abs()));
    }

    #[test]
    fn lcb_never_exceeds_mean(
        rows in prop::collection::vec((-5.0f64..5.0, 0.0f64..4.0), 1..20),
        beta in 0.0f64..5.0,
    ) {
        let m = PosteriorMoments {
            mean: rows.iter().map(|r| r.0).collect(),
            var_f: rows.iter().map(|r| r.1).collect(),
            var_y: rows.iter().map(|r| r.1 + 0.1).collect(),
            gradients: None,
        };
        for (a, r) in lcb(&m, beta).iter().zip(&rows) {
            prop_assert!(*a <= r.0);
        }
    }

    #[test]
    fn random_search_stays_in_box_and_is_monotone(budget in 1usize..30, seed in 0u64..100) {
        let f = TestFunction::StyblinskiTang;
        let h = random_search(&f, budget, seed).unwrap();
        prop_assert_eq!(h.len(), budget);
        prop_assert!(h.best_so_far.windows(2).all(|w| w[1] <= w[0]));
        for x in &h.points {
            prop_assert!(x.iter().zip(f.bounds()).all(|(v, (lo, hi))| lo <= *v && *v <= hi));
        }
    }
}
