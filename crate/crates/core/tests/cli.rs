use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use srlab::cli::{load_model, read_json, ModelFile};

const SMALL: &str = r#"
[dataset]
k = 60
rollout_episodes = 20
rollout_steps = 100
seed = 3

[tsne]
perplexity = 10.0
iterations = 300
exaggeration_iterations = 100
momentum_switch = 100
learning_rate = 50.0

[region]
grid_resolution = 20

[policy]
hidden = [16, 16]
n_steps = 256
n_minibatches = 8
n_epochs = 2
horizon = 100

[run]
total_steps = 512
seeds = [0, 1]
eval_samples = 200
bound_samples = 100
"#;

fn srlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srlab")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = srlab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            files.insert(p.clone(), std::fs::read(&p).unwrap());
        }
    }
    files
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    (header, lines.map(|l| l.split(',').map(str::to_string).collect()).collect())
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let (header, rows) = csv_rows(path);
    let c = header.iter().position(|h| h == name).unwrap();
    rows.iter().map(|r| r[c].parse().unwrap()).collect()
}

struct Workdir {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

fn workdir() -> Workdir {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("small.toml");
    std::fs::write(&config, SMALL).unwrap();
    Workdir {
        config: config.display().to_string(),
        root,
        _tmp: tmp,
    }
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let w = workdir();
    let data = w.root.join("data");
    let region = w.root.join("region");
    let train = w.root.join("train");
    let eval = w.root.join("eval");
    let bounds = w.root.join("bounds");
    let model = s(&region.join("model.json"));
    let dataset = s(&data.join("dataset.csv"));
    let steps: Vec<(PathBuf, Vec<String>)> = vec![
        (data.clone(), vec!["gen-data".into(), "--alpha".into(), "0.5".into()]),
        (region.clone(), vec!["build-region".into(), "--dataset".into(), dataset]),
        (train.clone(), vec!["train".into(), "--model".into(), model.clone()]),
        (eval.clone(), vec!["eval".into(), "--model".into(), model.clone(), "--label".into()]),
        (
            bounds.clone(),
            vec![
                "bounds".into(),
                "--model".into(),
                model,
                "--visited".into(),
                s(&train.join("visited_seed0.csv")),
                s(&train.join("visited_seed1.csv")),
            ],
        ),
    ];
    for (dir, args) in &steps {
        let mut full: Vec<String> = args.clone();
        full.extend(["--config".into(), w.config.clone(), "--out".into(), s(dir)]);
        let argv: Vec<&str> = full.iter().map(String::as_str).collect();
        ok(&argv);
        let first = snapshot(dir);
        assert!(first.len() >= 2, "{dir:?}");
        ok(&argv);
        assert_eq!(first, snapshot(dir), "{:?} changed on rerun", args[0]);
    }

    // Dataset composition.
    let (header, rows) = csv_rows(&data.join("dataset.csv"));
    assert_eq!(header, ["theta1", "theta2", "theta3", "dtheta1", "dtheta2", "dtheta3", "label", "provenance"]);
    assert_eq!(rows.len(), 60);
    assert_eq!(rows.iter().filter(|r| r[7] == "ud").count(), 30);

    // Every JSON artifact carries the version and the resolved config.
    for f in [
        data.join("mnd.json"),
        region.join("model.json"),
        train.join("train_summary.json"),
        eval.join("eval.json"),
        bounds.join("bounds.json"),
    ] {
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&f).unwrap()).unwrap();
        assert!(v["version"].is_string());
        assert_eq!(v["config"]["dataset"]["k"], 60);
    }
    let resolved = std::fs::read_to_string(train.join("config.resolved.toml")).unwrap();
    assert!(resolved.starts_with("# srlab "));

    // The model file round-trips exactly.
    let file: ModelFile = read_json(&region.join("model.json")).unwrap();
    let text = serde_json::to_string(&file.model).unwrap();
    let back: srlab::region::SafeRegionModel = serde_json::from_str(&text).unwrap();
    assert_eq!(back, file.model);
    assert_eq!(load_model(&region.join("model.json")).unwrap(), file.model);

    let grid = column(&region.join("grid.csv"), "gamma");
    assert_eq!(grid.len(), 400);
    assert!(grid.iter().all(|g| (0.0..=1.0).contains(g)));

    // Supervised accounting.
    for seed in [0, 1] {
        let m = train.join(format!("metrics_seed{seed}.csv"));
        let (a, f) = (column(&m, "activations"), column(&m, "failures"));
        assert!(a.iter().zip(&f).all(|(a, f)| f <= a));
        let (_, decisions) = csv_rows(&train.join(format!("decisions_seed{seed}.csv")));
        let (_, visited) = csv_rows(&train.join(format!("visited_seed{seed}.csv")));
        assert_eq!(decisions.iter().filter(|d| !d[2].is_empty()).count(), visited.len());
        let mut switched = (String::new(), false);
        for d in &decisions {
            if d[0] != switched.0 {
                switched = (d[0].clone(), false);
            }
            if d[3] == "policy" {
                assert!(!switched.1 && d[2] == "1", "policy acted at {d:?}");
            } else {
                switched.1 = true;
            }
        }
    }

    let report: Value = serde_json::from_str(&std::fs::read_to_string(bounds.join("bounds.json")).unwrap()).unwrap();
    let data = &report["data"];
    let rate = |k: &str| data[k].as_f64().unwrap();
    assert!((rate("eps_hat") - rate("fp_rate") - rate("fn_rate")).abs() < 1e-12);
    assert_eq!(data["n_dn"], 100);
    assert!(data["n_d"].as_u64().unwrap() <= 100);
}

#[test]
fn nominal_plant_has_no_labeling_disagreement() {
    let w = workdir();
    let data = w.root.join("data");
    let region = w.root.join("region");
    let bounds = w.root.join("bounds");
    ok(&["gen-data", "--config", &w.config, "--out", &s(&data)]);
    ok(&[
        "build-region",
        "--config",
        &w.config,
        "--dataset",
        &s(&data.join("dataset.csv")),
        "--out",
        &s(&region),
    ]);
    // Any states will do as samples of D here; reuse the dataset's.
    let (_, rows) = csv_rows(&data.join("dataset.csv"));
    let visited = w.root.join("visited.csv");
    let mut text = String::from("theta1,theta2,theta3,dtheta1,dtheta2,dtheta3\n");
    for r in &rows {
        text.push_str(&r[..6].join(","));
        text.push('\n');
    }
    std::fs::write(&visited, text).unwrap();
    ok(&[
        "bounds",
        "--config",
        &w.config,
        "--delta",
        "1",
        "--model",
        &s(&region.join("model.json")),
        "--visited",
        &s(&visited),
        "--out",
        &s(&bounds),
    ]);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(bounds.join("bounds.json")).unwrap()).unwrap();
    assert_eq!(v["data"]["e1_hat"], 0.0);
    assert_eq!(v["data"]["e2_hat"], 0.0);
    assert_eq!(v["data"]["n_d"], 60);
}

#[test]
fn uniform_only_dataset_still_fits_the_normal() {
    let w = workdir();
    let out = w.root.join("a1");
    let summary = ok(&["gen-data", "--config", &w.config, "--alpha", "1", "--out", &s(&out)]);
    assert_eq!(summary["mnd_rows"], 0);
    assert_eq!(summary["ud_rows"], 60);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(out.join("mnd.json")).unwrap()).unwrap();
    assert_eq!(v["data"]["mnd"]["mean"].as_array().unwrap().len(), 6);
    assert_eq!(v["data"]["mnd"]["covariance"].as_array().unwrap().len(), 36);
    let (_, rows) = csv_rows(&out.join("dataset.csv"));
    assert!(rows.iter().all(|r| r[7] == "ud"));
}

#[test]
fn free_learning_and_seed_means() {
    let w = workdir();
    let out = w.root.join("free");
    let summary = ok(&["train", "--config", &w.config, "--out", &s(&out)]);
    assert_eq!(summary["supervised"], false);
    let per_seed: Vec<PathBuf> = [0, 1].iter().map(|s| out.join(format!("metrics_seed{s}.csv"))).collect();
    for m in &per_seed {
        assert!(column(m, "activations").iter().all(|a| *a == 0.0));
        assert!(column(m, "failures").iter().all(|f| *f == 0.0));
    }
    assert!(column(&per_seed[0], "violations").last().unwrap() > &0.0);
    let mean = out.join("metrics_mean.csv");
    for col in ["mean_reward", "violations", "episodes", "policy_loss"] {
        let (a, b, m) = (column(&per_seed[0], col), column(&per_seed[1], col), column(&mean, col));
        assert_eq!(m.len(), a.len());
        for i in 0..m.len() {
            assert!((m[i] - 0.5 * (a[i] + b[i])).abs() <= 1e-12 * (1.0 + m[i].abs()), "{col} row {i}");
        }
    }
}

#[test]
fn toy_verification_subcommand() {
    let w = workdir();
    let out = w.root.join("toys");
    let v = ok(&["verify-toy", "--count", "100", "--out", &s(&out)]);
    assert_eq!(v["count"], 100);
    assert_eq!(v["all_hold"], true);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("toy_report.json")).unwrap()).unwrap();
    assert_eq!(report["data"]["reports"].as_array().unwrap().len(), 100);
}

#[test]
fn errors_are_one_json_line_with_nonzero_exit() {
    let w = workdir();
    let cases: Vec<Vec<String>> = vec![
        vec!["build-region".into(), "--dataset".into(), s(&w.root.join("missing.csv"))],
        vec!["gen-data".into(), "--set".into(), "dataset.alpha=2".into(), "--out".into(), s(&w.root.join("x"))],
        vec!["gen-data".into(), "--set".into(), "dataset.bogus=1".into(), "--out".into(), s(&w.root.join("y"))],
    ];
    for args in cases {
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = srlab(&argv);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        let v: Value = serde_json::from_str(err.trim()).unwrap();
        assert!(v["error"].is_string() && v["message"].is_string());
    }
}

#[test]
fn single_class_dataset_is_rejected() {
    let w = workdir();
    let path = w.root.join("one_class.csv");
    std::fs::write(
        &path,
        "theta1,theta2,theta3,dtheta1,dtheta2,dtheta3,label,provenance\n0,0,0,0,0,0,1,ud\n0.1,0,0,0,0,0,1,ud\n0.2,0,0,0,0,0,1,mnd\n",
    )
    .unwrap();
    let out = srlab(&["build-region", "--dataset", &s(&path), "--out", &s(&w.root.join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"], "single_class");
}

#[test]
fn sweep_writes_a_summary_per_cell() {
    let w = workdir();
    let out = w.root.join("sweep");
    let cells = ok(&[
        "sweep",
        "--config",
        &w.config,
        "--alphas",
        "0,1",
        "--deltas",
        "1.5",
        "--baseline",
        "--set",
        "run.seeds=[0]",
        "--out",
        &s(&out),
    ]);
    let cells = cells.as_array().unwrap();
    assert_eq!(cells.len(), 3);
    assert!(out.join("sweep_summary.json").is_file());
    for c in cells {
        let dir = PathBuf::from(c["dir"].as_str().unwrap());
        assert!(dir.join("train_summary.json").is_file());
        if c["learner_steps"].as_u64().unwrap() > 0 && !c["alpha"].is_null() {
            assert!(dir.join("bounds.json").is_file());
        }
    }
    assert!(cells[2]["alpha"].is_null());
}
