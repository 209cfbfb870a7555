use super::*;

/// `‖x‖²` on `[-1, 1]^2`, with gradient.
struct Bowl;

impl Evaluator for Bowl {
    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(-1.0, 1.0); 2]
    }

    fn evaluate(&self, x: &[f64]) -> Result<(f64, Option<Vec<f64>>)> {
        Ok((
            x.iter().map(|v| v * v).sum(),
            Some(x.iter().map(|v| 2.0 * v).collect()),
        ))
    }
}

/// Fails on the left half of the box.
struct Flaky;

impl Evaluator for Flaky {
    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(-1.0, 1.0); 2]
    }

    fn evaluate(&self, x: &[f64]) -> Result<(f64, Option<Vec<f64>>)> {
        if x[0] < 0.0 {
            return Err(Error::OutOfBox {
                function: "flaky".into(),
            });
        }
        Bowl.evaluate(x)
    }
}

fn exact_config(beta: f64) -> BoConfig {
    BoConfig {
        budget: 14,
        init_count: 12,
        beta,
        retrain_epochs: 100,
        ..BoConfig::new(ModelSpec::new(ModelKind::Exact, 1, None, 2).unwrap())
    }
}

fn bowl_history(n: usize, seed: u64) -> History {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = History::default();
    for _ in 0..n {
        let x = to_raw(&random_unit(2, &mut rng), &Bowl.bounds());
        let (y, g) = Bowl.evaluate(&x).unwrap();
        h.push(x, y, g);
    }
    h
}

#[test]
fn lcb_arithmetic() {
    let m = PosteriorMoments {
        mean: vec![1.0, 1.0, 2.0],
        var_f: vec![4.0, 0.0, 9.0],
        var_y: vec![4.0, 0.0, 9.0],
        gradients: None,
    };
    assert_eq!(lcb(&m, 2.0), vec![-3.0, 1.0, -4.0]);
    assert_eq!(lcb(&m, 0.0), vec![1.0, 1.0, 2.0]);
}

#[test]
fn config_invariants() {
    let mut c = exact_config(2.0);
    assert!(c.validate().is_ok());
    c.beta = -1.0;
    assert!(c.validate().is_err());
    c = exact_config(2.0);
    c.batch_size = 3;
    assert!(c.validate().is_err());
    c.init_count = c.budget;
    assert!(c.validate().is_ok(), "pure random search is allowed");
}

#[test]
fn convex_quadratic_suggestion_near_minimizer() {
    let mut h = bowl_history(25, 3);
    let bounds = Bowl.bounds();
    let cfg = BoConfig {
        retrain_epochs: 200,
        ..exact_config(0.0)
    };
    let s = fit_surrogate(&mut h, &bounds, &cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let u = suggest(&s, 2, &[], 1, 0.0, &mut rng).unwrap();
    let x = to_raw(&u[0], &bounds);
    // box width is 2 in each coordinate
    let err = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(err < 1e-2 * 2.0, "suggested {x:?}");
}

#[test]
fn suggestion_never_worse_than_incumbent_mean() {
    let mut h = bowl_history(15, 8);
    let bounds = Bowl.bounds();
    let cfg = exact_config(0.0);
    let s = fit_surrogate(&mut h, &bounds, &cfg, 0).unwrap();
    let best = (0..h.len())
        .min_by(|&a, &b| h.values[a].total_cmp(&h.values[b]))
        .unwrap();
    let inc = to_unit(&h.points[best], &bounds);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u = suggest(&s, 2, std::slice::from_ref(&inc), 1, 0.0, &mut rng).unwrap();
    let a = acquisition(&s, &[u[0].clone(), inc], 0.0).unwrap();
    assert!(a[0] <= a[1] + 1e-8);
}

#[test]
fn batch_of_three_is_distinct_and_deterministic() {
    let bounds = Bowl.bounds();
    let cfg = BoConfig {
        batch_size: 3,
        budget: 20,
        ..exact_config(2.0)
    };
    let run = || {
        let mut h = bowl_history(12, 4);
        ask(&mut h, &bounds, &cfg, 5).unwrap()
    };
    let a = run();
    assert_eq!(a.len(), 3);
    for i in 0..3 {
        for j in 0..i {
            assert!(distance(&a[i], &a[j]) >= 2.0 * MIN_SEPARATION);
        }
        assert!(a[i]
            .iter()
            .zip(&bounds)
            .all(|(v, (lo, hi))| lo <= v && v <= hi));
    }
    assert_eq!(a, run());
}

#[test]
fn padding_fills_missing_points() {
    let h = bowl_history(12, 6);
    let data = h
        .to_dataset(2)
        .unwrap()
        .standardize(Some(&Bowl.bounds()))
        .unwrap();
    let spec = ModelSpec::new(ModelKind::Exact, 1, None, 2).unwrap();
    let s = fit(&spec, &data, &FitOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // more points than starts: the tail must be padded
    let u = suggest(&s, 2, &[], RANDOM_STARTS + 4, 1.0, &mut rng).unwrap();
    assert_eq!(u.len(), RANDOM_STARTS + 4);
}

#[test]
fn budget_equal_to_init_is_random_search() {
    let h = random_search(&Bowl, 9, 3).unwrap();
    assert_eq!(h.len(), 9);
    assert_eq!(h.gradient_reads, 0);
    let again = random_search(&Bowl, 9, 3).unwrap();
    assert_eq!(h, again);
}

#[test]
fn best_so_far_is_monotone_and_trace_written() {
    let dir = std::env::temp_dir().join(format!("dirgp-bo-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("trace.csv");
    let h = run_bo(&exact_config(2.0), &Bowl, Some(&path)).unwrap();
    assert_eq!(h.len(), 14);
    assert!(h.best_so_far.windows(2).all(|w| w[1] <= w[0]));
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 15);
    assert!(text.starts_with("eval,x1,x2,y,best_so_far,dy1,dy2"));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn derivative_blind_surrogate_never_reads_gradients() {
    let spec = ModelSpec::new(ModelKind::Svgp, 8, None, 2).unwrap();
    let cfg = BoConfig {
        budget: 14,
        init_count: 10,
        retrain_epochs: 30,
        ..BoConfig::new(spec)
    };
    let h = run_bo(&cfg, &Bowl, None).unwrap();
    assert_eq!(h.len(), 14);
    assert_eq!(h.gradient_reads, 0);

    let spec = ModelSpec::new(ModelKind::Dsvgp, 8, Some(1), 2).unwrap();
    let h = run_bo(
        &BoConfig {
            surrogate: spec,
            ..cfg
        },
        &Bowl,
        None,
    )
    .unwrap();
    assert!(
        h.gradient_reads > 0,
        "the instrumentation must see derivative use"
    );
}

#[test]
fn failed_evaluations_are_skipped_but_counted() {
    let cfg = BoConfig {
        budget: 12,
        init_count: 12,
        ..exact_config(2.0)
    };
    let h = run_bo(&cfg, &Flaky, None).unwrap();
    assert_eq!(h.evaluations(), 12);
    assert!(!h.failures.is_empty());
    assert!(h.points.iter().all(|x| x[0] >= 0.0));
}

#[test]
fn history_round_trips_through_dataset() {
    let mut h = bowl_history(5, 1);
    h.gradients[2] = None;
    let d = h.to_dataset(2).unwrap();
    let back = History::from_dataset(&d);
    assert_eq!(back.points, h.points);
    assert_eq!(back.values, h.values);
    assert_eq!(back.gradients, h.gradients);
}
