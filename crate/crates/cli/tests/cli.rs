use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deeppce::data::gen_planted;
use deeppce::rng::{stream_rng, uniform};
use deeppce::training::{init_weights, TrainConfig};
use deeppce::{CircuitModel, ModelConfig, MultiIndexSet, PolyFamily, ShallowPce};
use ndarray::Array2;
use serde_json::Value;

fn deeppce(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deeppce"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "command failed: {}", stderr(&o));
    o
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Noiseless planted D=4, K=2 expansion saved as a tensor file.
fn planted_data(dir: &Path) -> PathBuf {
    let marginals = vec![
        PolyFamily::standard_normal(),
        PolyFamily::uniform(-1.0, 1.0).unwrap(),
        PolyFamily::normal(0.5, 2.0).unwrap(),
        PolyFamily::uniform(0.0, 3.0).unwrap(),
    ];
    let basis = MultiIndexSet::generate(4, 2, 1.0).unwrap();
    let mut rng = stream_rng(3, 0);
    let w = Array2::from_shape_fn((1, basis.len()), |_| uniform(&mut rng, -1.0, 1.0));
    let pce = ShallowPce::new(basis, marginals, w).unwrap();
    let path = dir.join("planted.tensor");
    gen_planted(&pce, 2000, 3).unwrap().save_tensor(&path).unwrap();
    path
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

const SINGLE_REGION: &str = r#"
[model]
scope_size = 4
max_order = 2
num_sums = 4

[train]
max_epochs = 150
early_stop_patience = 20
learning_rate = 1e-2

[data]
val_fraction = 0.2
"#;

#[test]
fn gen_data_rejects_zero_samples() {
    let dir = tempfile::tempdir().unwrap();
    let o = deeppce(&["gen-data", "--problem", "100d", "--n", "0", "--out", "d.tensor", "--run-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[argument]:"), "{}", stderr(&o));
}

#[test]
fn gen_data_is_reproducible_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    for name in ["a.tensor", "b.tensor"] {
        ok(deeppce(&["gen-data", "--problem", "100d", "--n", "50", "--seed", "4", "--out", name, "--run-dir", s(&run)]));
    }
    assert_eq!(fs::read(run.join("a.tensor")).unwrap(), fs::read(run.join("b.tensor")).unwrap());
    let manifest = read_json(&run.join("manifest.json"));
    let entries = manifest["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0]["seeds"]["seed"], 4);
    assert_eq!(entries[0]["config"]["problem"], "100d");
    assert_eq!(entries[1]["artifacts"][0]["path"], "b.tensor");
}

#[test]
fn gen_data_csv_and_quadratic_map() {
    let dir = tempfile::tempdir().unwrap();
    ok(deeppce(&[
        "gen-data", "--problem", "quadratic-map", "--n", "10", "--inputs", "3", "--outputs", "2", "--out", "q.csv",
        "--run-dir", s(dir.path()),
    ]));
    let text = fs::read_to_string(dir.path().join("q.csv")).unwrap();
    assert!(text.starts_with("x_1,x_2,x_3,y_1,y_2"));
    assert_eq!(text.lines().count(), 11);
}

#[test]
fn outputs_cannot_escape_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = deeppce(&["gen-data", "--problem", "100d", "--n", "5", "--out", "../x.tensor", "--run-dir", s(&dir.path().join("r"))]);
    assert!(!o.status.success());
    assert!(!dir.path().join("x.tensor").exists());
}

#[test]
fn train_requires_config() {
    let o = deeppce(&["train", "--data", "x.tensor"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]:"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = planted_data(dir.path());
    let cfg = write_config(dir.path(), &format!("{SINGLE_REGION}\n[output]\nrun_dir = \"r\"\ncolour = 1\n"));
    let o = deeppce(&["train", "--config", s(&cfg), "--data", s(&data)]);
    assert!(stderr(&o).starts_with("error[config]:"), "{}", stderr(&o));
}

#[test]
fn missing_data_file_fails_at_startup() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SINGLE_REGION);
    let o = deeppce(&["train", "--config", s(&cfg), "--data", s(&dir.path().join("nope.tensor"))]);
    assert!(stderr(&o).starts_with("error[io]:"), "{}", stderr(&o));
}

#[test]
fn planted_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = planted_data(dir.path());
    let cfg = write_config(dir.path(), SINGLE_REGION);
    let run = dir.path().join("run");
    let out = ok(deeppce(&["train", "--config", s(&cfg), "--data", s(&data), "--restarts", "3", "--run-dir", s(&run)]));
    assert!(stdout(&out).contains("chosen restart"));

    let report = read_json(&run.join("train_report.json"));
    assert_eq!(report["report"]["restarts"].as_array().unwrap().len(), 3);
    assert_eq!(report["config"]["train"]["n_restarts"], 3);
    assert_eq!(report["config"]["model"]["num_sums"], 4);
    let chosen = report["report"]["chosen_restart"].as_u64().unwrap() as usize;
    let val_rel = report["report"]["restarts"][chosen]["best_val_relative_mse"].as_f64().unwrap();
    assert!(val_rel < 1e-3, "val relative MSE {val_rel}");

    let model = run.join("model.dpce");
    ok(deeppce(&["predict", "--model", s(&model), "--data", s(&data), "--run-dir", s(&run)]));
    let pred = read_json(&run.join("predictions.json"));
    assert!(pred["relative_mse"].as_f64().unwrap() < 1e-3);
    let csv = fs::read_to_string(run.join("predictions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2001);

    // conditioning on every input reproduces the prediction at that point
    let loaded = deeppce::Dataset::load_tensor(&data).unwrap();
    let x = loaded.inputs.row(0);
    let cond: Vec<String> = x.iter().enumerate().map(|(i, v)| format!("{}={v}", i + 1)).collect();
    let o = ok(deeppce(&["moments", "--model", s(&model), "--query", "cond-mean", "--condition", &cond.join(",")]));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let first: f64 = csv.lines().nth(1).unwrap().parse().unwrap();
    assert!((v["value"][0].as_f64().unwrap() - first).abs() < 1e-9 * first.abs().max(1.0));

    // the law of total covariance across two queries
    let q = |query: &str| -> f64 {
        let o = ok(deeppce(&["moments", "--model", s(&model), "--query", query, "--set", "1,3"]));
        serde_json::from_str::<Value>(&stdout(&o)).unwrap()["value"][0][0].as_f64().unwrap()
    };
    let o = ok(deeppce(&["moments", "--model", s(&model), "--query", "cov"]));
    let total = serde_json::from_str::<Value>(&stdout(&o)).unwrap()["value"][0][0].as_f64().unwrap();
    assert!((q("cov-cond-exp") + q("exp-cond-cov") - total).abs() < 1e-9 * total);

    let o = ok(deeppce(&["sobol", "--model", s(&model), "--normalize-sum", "--run-dir", s(&run)]));
    assert!(stdout(&o).contains("X_4"));
    let sob = read_json(&run.join("sobol.json"));
    let sum: f64 = sob["indices"][0].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-12);

    let manifest = read_json(&run.join("manifest.json"));
    let commands: Vec<&str> = manifest["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["command"].as_str().unwrap())
        .collect();
    assert_eq!(commands, ["train", "predict", "sobol"]);
}

#[test]
fn moments_argument_errors() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path(), false);
    let o = deeppce(&["moments", "--model", s(&model), "--query", "cond-mean"]);
    assert!(stderr(&o).starts_with("error[argument]:"));
    let o = deeppce(&["moments", "--model", s(&model), "--query", "cov-cond-exp", "--set", "9"]);
    assert!(stderr(&o).starts_with("error[argument]:"), "{}", stderr(&o));
    let o = deeppce(&["moments", "--model", s(&dir.path().join("missing.dpce")), "--query", "mean"]);
    assert!(stderr(&o).starts_with("error[io]:"));
}

/// D=3, scope-1 model saved to disk. With `only_first`, every leaf except
/// the one holding X_1 is constant.
fn small_model(dir: &Path, only_first: bool) -> PathBuf {
    let mut m = CircuitModel::build(ModelConfig::new(3, 1, 1, 2, 3, 1), vec![PolyFamily::standard_normal(); 3]).unwrap();
    init_weights(&mut m, &TrainConfig::default(), 1);
    if only_first {
        for leaf in &mut m.leaves {
            if leaf.scope != [0] {
                leaf.sum.weights.columns_mut().into_iter().skip(1).for_each(|mut c| c.fill(0.0));
                // a constant leaf has zero batch variance; keep its running stats sane
                leaf.sum.norm = None;
            }
        }
    }
    let path = dir.join("small.dpce");
    m.save(&path).unwrap();
    path
}

#[test]
fn sobol_of_a_univariate_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path(), true);
    let o = ok(deeppce(&["sobol", "--model", s(&model), "--run-dir", s(dir.path())]));
    assert!(stdout(&o).contains("analytic"));
    let sob = read_json(&dir.path().join("sobol.json"));
    let row: Vec<f64> = sob["indices"][0].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((row[0] - 1.0).abs() < 1e-12, "{row:?}");
    assert!(row[1].abs() < 1e-12 && row[2].abs() < 1e-12);
}

#[test]
fn sobol_with_mc_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path(), false);
    let o = ok(deeppce(&["sobol", "--model", s(&model), "--mc-baseline", "5e4", "--run-dir", s(dir.path())]));
    assert!(stdout(&o).contains("ratio"));
    let sob = read_json(&dir.path().join("sobol.json"));
    assert_eq!(sob["mc_baseline"]["n_base"], 10_000);
    assert!(sob["wall_clock_ratio"].as_f64().unwrap() > 0.0);
}

#[test]
fn predict_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path(), false);
    ok(deeppce(&["gen-data", "--problem", "100d", "--n", "5", "--out", "d.tensor", "--run-dir", s(dir.path())]));
    let o = deeppce(&["predict", "--model", s(&model), "--data", s(&dir.path().join("d.tensor")), "--run-dir", s(dir.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[argument]:"), "{}", stderr(&o));
}

#[test]
fn mc_check_needs_two_runs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path(), false);
    let o = deeppce(&["mc-check", "--model", s(&model), "--runs", "1", "--sizes", "100", "--run-dir", s(dir.path())]);
    assert!(stderr(&o).starts_with("error[argument]:"), "{}", stderr(&o));

    let run = |name: &str| {
        ok(deeppce(&[
            "mc-check", "--model", s(&model), "--runs", "5", "--sizes", "400,1600", "--set", "1,3", "--out", name,
            "--run-dir", s(dir.path()),
        ]));
        read_json(&dir.path().join(name))
    };
    let a = run("a.json");
    let b = run("b.json");
    assert_eq!(a["report"], b["report"]);
    assert_eq!(a["report"]["rows"].as_array().unwrap().len(), 2 * 5);
    assert!(dir.path().join("a.tsv").exists());
    assert_eq!(a["config"]["set"], serde_json::json!([1, 3]));
}
