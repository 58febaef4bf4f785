use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use crossre::commands::FitOutput;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_crossre");
const MODEL: [&str; 6] = ["--response", "y", "--fixed", "x1,x2", "--groups", "g1,g2"];

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("CROSSRE_THREADS").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, n: usize, levels: &str, family: &str, test_size: usize, seed: u64) {
    ok(&[
        "simulate",
        "--out-dir",
        s(dir),
        "--n",
        &n.to_string(),
        "--levels",
        levels,
        "--family",
        family,
        "--covariates",
        "2",
        "--seed",
        &seed.to_string(),
        "--test-size",
        &test_size.to_string(),
    ]);
}

fn fit(data: &Path, out: &Path, extra: &[&str]) -> FitOutput {
    let mut args = vec!["fit", "--data", s(data), "--out", s(out), "--omit-timing"];
    args.extend(MODEL);
    args.extend(extra);
    ok(&args);
    FitOutput::read(out).unwrap()
}

fn params(f: &FitOutput) -> Vec<f64> {
    f.params.re_variances.iter().chain(&f.params.error_variance).chain(&f.params.beta).copied().collect()
}

#[test]
fn one_config_drives_simulate_fit_and_predict() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let cfg = d.join("run.toml");
    fs::write(
        &cfg,
        format!(
            r#"
[simulation]
n = 1500
levels = [60, 60]
covariates = 2
seed = 4
test_size = 200

[model]
data = "{}"
response = "y"
fixed = ["x1", "x2"]
groups = ["g1", "g2"]

[estimation]
probes = 30

[prediction]
samples = 200
"#,
            s(&d.join("train.csv"))
        ),
    )
    .unwrap();
    let c = s(&cfg);
    ok(&["--config", c, "simulate", "--out-dir", s(d)]);
    assert!(d.join("test.csv").exists() && d.join("truth.json").exists());
    let fit_path = d.join("fit.json");
    ok(&["--config", c, "fit", "--out", s(&fit_path)]);
    let f = FitOutput::read(&fit_path).unwrap();
    assert_eq!(f.n, 1300);
    assert_eq!(f.estimation.probes, 30);
    assert!(f.converged, "{}", f.reason);
    let (pred, scores) = (d.join("pred.csv"), d.join("scores.json"));
    ok(&[
        "--config",
        c,
        "predict",
        "--fit",
        s(&fit_path),
        "--new",
        s(&d.join("test.csv")),
        "--truth-column",
        "re_truth",
        "--out",
        s(&pred),
        "--scores",
        s(&scores),
    ]);
    let text = fs::read_to_string(&pred).unwrap();
    assert_eq!(text.lines().count(), 201);
    assert!(text.starts_with("row,omega,re_mean,var,response_mean,response_var"));
    let sc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&scores).unwrap()).unwrap();
    assert_eq!(sc["samples"], 200);
    let rmse = sc["rmse"].as_f64().unwrap();
    assert!(rmse > 0.0 && rmse < 0.6, "{rmse}");
    assert!(sc["log_score"].as_f64().unwrap().is_finite());
}

#[test]
fn krylov_and_cholesky_fit_files_agree() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    for family in ["gaussian", "bernoulli"] {
        simulate(d, 5000, "250,250", family, 0, 11);
        let data = d.join("data.csv");
        let mut fam = vec!["--family", family];
        let a = fit(&data, &d.join("chol.json"), &[&fam[..], &["--backend", "cholesky"]].concat());
        fam.extend(["--backend", "krylov", "--cg-tol", "1e-6", "--probes", "200"]);
        let b = fit(&data, &d.join("kry.json"), &fam);
        assert_eq!(a.levels, vec![250, 250]);
        for (x, y) in params(&a).iter().zip(&params(&b)) {
            assert!((x - y).abs() <= 1e-2, "{family}: {:?} vs {:?}", params(&a), params(&b));
        }
    }
}

#[test]
fn ssor_nll_is_less_variable_than_diagonal() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, 4000, "200,200", "gaussian", 0, 12);
    let (out, data) = (d.join("bench.csv"), d.join("data.csv"));
    let mut args = vec!["bench-precond", "--data", s(&data), "--reps", "20", "--out", s(&out)];
    args.extend(MODEL);
    ok(&args);
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    let mut sd = std::collections::HashMap::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        sd.insert(rec[0].to_string(), rec[3].parse::<f64>().unwrap());
    }
    assert!(sd.contains_key("cholesky") && sd.contains_key("zic") && sd.contains_key("none"));
    assert_eq!(sd["cholesky"], 0.0);
    assert!(sd["ssor"] < sd["diagonal"], "{sd:?}");
}

#[test]
fn unknown_column_is_a_usage_error_naming_the_column() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), 300, "20,20", "gaussian", 0, 1);
    let data = tmp.path().join("data.csv");
    let out = run(&["fit", "--data", s(&data), "--response", "y", "--fixed", "x1,height", "--groups", "g1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("height"));
    let out = run(&["fit", "--data", s(&data), "--response", "y", "--groups", "g1", "--precond", "banana"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(&["fit", "--bogus"]).status.code(), Some(2));
}

#[test]
fn malformed_value_reports_its_line() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("bad.csv");
    fs::write(&data, "y,x1,g1\n1.0,0.5,a\n2.0,oops,b\n").unwrap();
    let out = run(&["fit", "--data", s(&data), "--response", "y", "--fixed", "x1", "--groups", "g1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(":3:") && err.contains("x1"), "{err}");
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, 600, "30,30", "gaussian", 0, 2);
    let data = d.join("data.csv");
    let cfg = d.join("c.toml");
    fs::write(&cfg, "[estimation]\nseed = 5\nprobes = 17\n").unwrap();
    let out = d.join("f.json");
    let base = ["fit", "--data", s(&data), "--out", s(&out), "--omit-timing"];
    let get = |extra: &[&str], with_cfg: bool| {
        let mut args: Vec<&str> = if with_cfg { vec!["--config", s(&cfg)] } else { vec![] };
        args.extend(base);
        args.extend(MODEL);
        args.extend(extra);
        ok(&args);
        FitOutput::read(&out).unwrap().estimation
    };
    let e = get(&[], false);
    assert_eq!((e.seed, e.probes), (1, 50));
    let e = get(&[], true);
    assert_eq!((e.seed, e.probes), (5, 17));
    let e = get(&["--seed", "7"], true);
    assert_eq!((e.seed, e.probes), (7, 17));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "[estimation]\nprobs = 3\n").unwrap();
    let out = run(&["--config", s(&cfg), "fit"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("probs"));
}

#[test]
fn reruns_without_timing_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, 1000, "40,40", "bernoulli", 0, 3);
    let data = d.join("data.csv");
    let (a, b) = (d.join("a.json"), d.join("b.json"));
    fit(&data, &a, &["--family", "bernoulli"]);
    fit(&data, &b, &["--family", "bernoulli", "--threads", "1"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let text = fs::read_to_string(&a).unwrap();
    assert!(text.contains("\"wall_clock_seconds\": null"));
}

#[test]
fn missing_group_values_form_their_own_level() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("m.csv");
    let mut text = String::from("y,g1\n");
    for i in 0..200 {
        let g = match i % 5 {
            0 => String::new(),
            1 => "NA".into(),
            k => format!("L{k}"),
        };
        text.push_str(&format!("{},{g}\n", (i % 7) as f64 * 0.3));
    }
    fs::write(&data, text).unwrap();
    let out = tmp.path().join("f.json");
    ok(&["fit", "--data", s(&data), "--response", "y", "--groups", "g1", "--out", s(&out), "--backend", "cholesky"]);
    // L2, L3, L4 plus one level for blank and NA.
    assert_eq!(FitOutput::read(&out).unwrap().levels, vec![4]);
}

#[test]
fn spectrum_reports_bound_checks() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, 1000, "50,50", "gaussian", 0, 5);
    let data = d.join("data.csv");
    let mut args = vec!["spectrum", "--data", s(&data)];
    args.extend(MODEL);
    let out = ok(&args);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["reports"].as_array().unwrap().len(), 3);
    let checks = v["checks"].as_array().unwrap();
    assert!(!checks.is_empty());
    assert!(checks.iter().all(|c| c["verdict"] != "fail"), "{checks:?}");
}
