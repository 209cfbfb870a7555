use std::fs;
use std::path::{Path, PathBuf};

use dirgp::cli::run;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dirgp-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

fn gen(dir: &Path, f: &str, n: &str, seed: &str) {
    let code = run([
        "dirgp",
        "gen",
        "--fn",
        f,
        "--n",
        n,
        "--seed",
        seed,
        "--out",
        s(dir),
    ]);
    assert_eq!(code, 0);
}

#[test]
fn gen_is_deterministic() {
    let a = scratch("gen-a");
    let b = scratch("gen-b");
    gen(&a, "sin5", "200", "1");
    gen(&b, "sin5", "200", "1");
    for file in ["sin5_train.csv", "sin5_test.csv"] {
        let x = fs::read(a.join(file)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.join(file)).unwrap(), "{file}");
    }
    assert_eq!(rows(&a.join("sin5_train.csv")).len(), 200);
    fs::remove_dir_all(a).ok();
    fs::remove_dir_all(b).ok();
}

#[test]
fn bad_configuration_exits_one() {
    let dir = scratch("bad");
    gen(&dir, "branin", "50", "2");
    let (tr, te) = (dir.join("branin_train.csv"), dir.join("branin_test.csv"));
    let base = [
        "dirgp",
        "train",
        "--train",
        s(&tr),
        "--test",
        s(&te),
        "--out",
        s(&dir),
    ];
    let with = |extra: &[&str]| run(base.iter().copied().chain(extra.iter().copied()));
    assert_eq!(with(&["--model", "svgp", "--p", "1"]), 1);
    assert_eq!(with(&["--model", "welchm"]), 1);
    assert_eq!(run(["dirgp", "frobnicate"]), 1);
    assert_eq!(run(["dirgp", "--help"]), 0);
    fs::remove_dir_all(dir).ok();
}

#[test]
fn train_reports_matrix_size_and_repeats_exactly() {
    let dir = scratch("train");
    gen(&dir, "branin", "120", "3");
    let (tr, te) = (dir.join("branin_train.csv"), dir.join("branin_test.csv"));
    let go = |out: &Path| {
        let args = [
            "dirgp",
            "train",
            "--train",
            s(&tr),
            "--test",
            s(&te),
            "--model",
            "dsvgp",
            "--p",
            "2",
            "--m",
            "20",
            "--epochs",
            "3",
            "--batch-size",
            "60",
            "--seed",
            "4",
            "--out",
            s(out),
        ];
        assert_eq!(run(args), 0);
        rows(&out.join("metrics.csv"))
    };
    let (o1, o2) = (dir.join("a"), dir.join("b"));
    let (r1, r2) = (go(&o1), go(&o2));
    assert_eq!(r1.len(), 1);
    assert_eq!(r1[0][0], "dsvgp2");
    assert_eq!(r1[0][3], "60");
    // everything but the wall time repeats
    let strip = |r: &[Vec<String>]| -> Vec<Vec<String>> {
        r.iter()
            .map(|row| [&row[..6], &row[7..]].concat())
            .collect()
    };
    assert_eq!(strip(&r1), strip(&r2));
    assert!(o1.join("checkpoint.json").exists());
    assert!(o1.join("train_manifest.json").exists());
    fs::remove_dir_all(dir).ok();
}

#[test]
fn sweep_matches_sizes() {
    let dir = scratch("sweep");
    gen(&dir, "branin", "150", "5");
    let (tr, te) = (dir.join("branin_train.csv"), dir.join("branin_test.csv"));
    let args = [
        "dirgp",
        "sweep",
        "--train",
        s(&tr),
        "--test",
        s(&te),
        "--sizes",
        "30,60,120",
        "--models",
        "svgp,dsvgp2",
        "--epochs",
        "1",
        "--batch-size",
        "150",
        "--out",
        s(&dir),
    ];
    assert_eq!(run(args), 0);
    let r = rows(&dir.join("sweep.csv"));
    assert_eq!(r.len(), 6);
    let find = |m: &str, size: &str| r.iter().find(|row| row[0] == m && row[3] == size).cloned();
    assert_eq!(find("dsvgp2", "120").unwrap()[1], "40");
    assert_eq!(find("svgp", "120").unwrap()[1], "120");
    fs::remove_dir_all(dir).ok();
}

#[test]
fn check_exit_codes() {
    let dir = scratch("check");
    let report = dir.join("report.json");
    assert_eq!(run(["dirgp", "check", "--report", s(&report)]), 0);
    let parsed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let checks = parsed.as_array().unwrap();
    assert!(checks.len() >= 5);
    assert!(checks.iter().all(|c| c["passed"] == true));
    assert_eq!(run(["dirgp", "check", "--mutate-hess-sign"]), 3);
    fs::remove_dir_all(dir).ok();
}

#[test]
fn random_bo_trace_has_one_row_per_evaluation() {
    let dir = scratch("bo");
    let args = [
        "dirgp",
        "bo",
        "--fn",
        "branin",
        "--surrogate",
        "random",
        "--budget",
        "15",
        "--init",
        "5",
        "--seeds",
        "1,2",
        "--out",
        s(&dir),
    ];
    assert_eq!(run(args), 0);
    for seed in [1, 2] {
        let r = rows(&dir.join(format!("trace_seed{seed}.csv")));
        assert_eq!(r.len(), 15);
        let best: Vec<f64> = r.iter().map(|row| row[4].parse().unwrap()).collect();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
    }
    assert_eq!(rows(&dir.join("median_best.csv")).len(), 15);
    fs::remove_dir_all(dir).ok();
}

#[test]
fn ask_tell_round_trip() {
    let dir = scratch("asktell");
    let history = dir.join("history.csv");
    let suggest = dir.join("suggest.csv");
    let ask = |q: &str| {
        let args = [
            "dirgp",
            "ask",
            "--history",
            s(&history),
            "--bounds",
            "-5:10,0:15",
            "--surrogate",
            "random",
            "--q",
            q,
            "--seed",
            "7",
            "--suggest",
            s(&suggest),
        ];
        assert_eq!(run(args), 0);
        rows(&suggest)
    };
    let pts = ask("3");
    assert_eq!(pts.len(), 3);
    // evaluate Branin by hand and tell
    let mut obs = String::from("x1,x2,y\n");
    for p in &pts {
        let x: Vec<f64> = p.iter().map(|v| v.parse().unwrap()).collect();
        assert!((-5.0..=10.0).contains(&x[0]) && (0.0..=15.0).contains(&x[1]));
        let y = dirgp::data::TestFunction::Branin.evaluate(&x).unwrap().0;
        obs.push_str(&format!("{},{},{y}\n", p[0], p[1]));
    }
    let obs_path = dir.join("obs.csv");
    fs::write(&obs_path, obs).unwrap();
    let tell = [
        "dirgp",
        "tell",
        "--history",
        s(&history),
        "--observations",
        s(&obs_path),
    ];
    assert_eq!(run(tell), 0);
    assert_eq!(rows(&history).len(), 3);
    let next = ask("1");
    assert_eq!(next.len(), 1);
    assert!(!pts.contains(&next[0]));
    fs::remove_dir_all(dir).ok();
}
