use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_switchode");

fn model(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn run_with_threads(args: &[&str], threads: &str) -> Output {
    Command::new(BIN)
        .args(args)
        .env("SWITCHODE_THREADS", threads)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn csv_rows(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect()
}

#[test]
fn reducible_generator_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(
        dir.path(),
        "red.json",
        r#"{"schema_version": 1, "env": {"kind": "rates", "rates": [[0, 0], [1, -1]]}}"#,
    );
    let o = run(&["env", "check", "--model", m.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not irreducible"), "{}", stderr(&o));
}

#[test]
fn malformed_models_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (
            "unknown.json",
            r#"{"schema_version": 1, "env": {"kind": "two_state", "p": 1, "q": 1}, "x": 1}"#,
        ),
        (
            "version.json",
            r#"{"schema_version": 9, "env": {"kind": "two_state", "p": 1, "q": 1}}"#,
        ),
        ("syntax.json", "{ not json"),
        (
            "rates.json",
            r#"{"schema_version": 1, "env": {"kind": "two_state", "p": -1, "q": 1}}"#,
        ),
    ];
    for (name, text) in cases {
        let m = write(dir.path(), name, text);
        let o = run(&["lv", "c1", "--model", m.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", stderr(&o));
    }
    let o = run(&["env", "check", "--model", "/no/such/model.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_suite_exits_2() {
    let o = run(&["reproduce", "--suite", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_thread_count_exits_2() {
    let o = run_with_threads(
        &["env", "check", "--model", model("fmc.json").to_str().unwrap()],
        "zero",
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn env_check_reports_two_state_inverse() {
    let o = run(&["env", "check", "--model", model("logistic.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let out = &v["outputs"];
    assert_eq!(out["pi"], serde_json::json!([0.5, 0.5]));
    assert!((out["spectral_gap"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    // Q/(p+q)² with p = q = 1
    let x = &out["pseudo_inverse"];
    assert!((x[0][0].as_f64().unwrap() + 0.25).abs() < 1e-12);
    assert!((x[0][1].as_f64().unwrap() - 0.25).abs() < 1e-12);
    assert_eq!(v["tool"], "switchode");
    assert_eq!(v["inputs"]["model"]["name"], "logistic-invader");
}

#[test]
fn sweep_csv_meets_interval_checks() {
    let o = run(&["lyapunov", "sweep", "--model", model("fmc.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("# switchode "));
    assert!(text.lines().any(|l| l == "p,lambda_max,c1"));
    let rows = csv_rows(&text);
    assert_eq!(rows.len(), 99);
    let max = rows.iter().map(|r| r[1]).fold(f64::NEG_INFINITY, f64::max);
    assert!((-0.5..=-0.45).contains(&max), "max lambda {max}");
    let min_c1 = rows
        .iter()
        .filter(|r| (0.3 - 1e-9..=0.5 + 1e-9).contains(&r[0]))
        .map(|r| r[2])
        .fold(f64::INFINITY, f64::min);
    assert!(min_c1 >= 15.0, "min c1 {min_c1}");
}

#[test]
fn sweep_grid_forms() {
    let m = model("fmc.json");
    let o = run(&["lyapunov", "sweep", "--model", m.to_str().unwrap(), "--grid", "0.2,0.5"]);
    let rows = csv_rows(&stdout(&o));
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), vec![0.2, 0.5]);
    assert!((rows[1][1] + 0.5).abs() < 1e-9);
    let o = run(&["lyapunov", "sweep", "--model", m.to_str().unwrap(), "--grid", "0:0.5:1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn richardson_table_matches_frozen_values() {
    let m = model("split.json");
    let o = run(&[
        "split",
        "richardson",
        "--model",
        m.to_str().unwrap(),
        "--eps",
        "0.2",
        "--eps",
        "0.1",
        "--eps",
        "0.05",
        "--eps",
        "0.025",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = csv_rows(&stdout(&o));
    let raw = [-1.4390663e-2, -7.3825938e-3, -3.7402831e-3, -1.8826757e-3];
    let ext = [-3.745243e-4, -9.797246e-5, -2.506834e-5, -6.341162e-6];
    for (k, r) in rows.iter().enumerate() {
        assert!((r[1] - raw[k]).abs() < 1e-9, "raw {k}: {}", r[1]);
        assert!((r[2] - ext[k]).abs() < 1e-11, "extrapolated {k}: {}", r[2]);
        assert_eq!(r[3], 0.0);
    }
}

#[test]
fn lv_c1_reports_benchmark_values() {
    let o = run(&["lv", "c1", "--model", model("logistic.json").to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["outputs"]["lambda0"].as_f64().unwrap() + 0.375).abs() < 1e-12);
    assert!((v["outputs"]["c1"].as_f64().unwrap() - 0.28125).abs() < 1e-12);
    assert_eq!(v["outputs"]["signs"]["agree"], true);
}

#[test]
fn semigroup_first_order_term() {
    let o = run(&[
        "semigroup",
        "--model",
        model("relaxation.json").to_str().unwrap(),
        "--eps",
        "0.1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let p1 = v["outputs"]["p1"]["value"].as_f64().unwrap();
    assert!((p1 + 0.166326).abs() < 1e-5, "{p1}");
}

#[test]
fn signs_csv_agrees_on_competitive_draws() {
    let o = run(&["lv", "signs", "--draws", "40"]);
    let text = stdout(&o);
    let agree: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap())
        .collect();
    assert_eq!(agree.len(), 40);
    assert!(agree.iter().all(|a| *a == "true" || *a == "na"));
}

fn rerun_bytes(args: &[&str], threads: &str) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/result.out");
    let mut full: Vec<&str> = args.to_vec();
    let out_s = out.to_str().unwrap().to_string();
    full.extend(["--out", &out_s]);
    let o = run_with_threads(&full, threads);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    fs::read(&out).unwrap()
}

#[test]
fn reruns_are_byte_identical() {
    let lv = model("logistic.json");
    let split = model("split.json");
    let fmc = model("fmc.json");
    let cases: Vec<Vec<&str>> = vec![
        vec![
            "lv",
            "mc",
            "--model",
            lv.to_str().unwrap(),
            "--eps",
            "0.1",
            "--horizon",
            "500",
            "--burn-in",
            "20",
            "--seed",
            "7",
        ],
        vec![
            "split",
            "weak-error",
            "--model",
            split.to_str().unwrap(),
            "--eps",
            "0.2",
            "--eps",
            "0.1",
            "--mc",
            "500",
        ],
        vec![
            "lyapunov",
            "mc",
            "--model",
            fmc.to_str().unwrap(),
            "--eps",
            "0.1",
            "--horizon",
            "300",
            "--burn-in",
            "20",
        ],
    ];
    for args in &cases {
        let a = rerun_bytes(args, "1");
        let b = rerun_bytes(args, "1");
        let c = rerun_bytes(args, "3");
        assert_eq!(a, b, "{args:?}");
        assert_eq!(a, c, "thread count changed {args:?}");
    }
}

#[test]
fn seed_changes_monte_carlo_output() {
    let split = model("split.json");
    let base = [
        "split",
        "weak-error",
        "--model",
        split.to_str().unwrap(),
        "--eps",
        "0.2",
        "--mc",
        "200",
    ];
    let mut a = base.to_vec();
    a.extend(["--seed", "1"]);
    let mut b = base.to_vec();
    b.extend(["--seed", "0x2"]);
    let (oa, ob) = (run(&a), run(&b));
    assert!(oa.status.success() && ob.status.success());
    assert_ne!(csv_rows(&stdout(&oa)), csv_rows(&stdout(&ob)));
    assert!(stdout(&ob).contains("# seed: 2"));
}

#[test]
fn reproduce_fast_subset_records_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fast.json");
    let o = run(&["reproduce", "--suite", "fast", "--out", out.to_str().unwrap()]);
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 6, "{table}");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let ids: Vec<u64> = v["outputs"]["criteria"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["id"].as_u64().unwrap())
        .collect();
    assert_eq!(ids, vec![1, 2, 3, 5, 7, 8]);
    let failed = v["outputs"]["criteria"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .count();
    let expected = if failed == 0 { 0 } else { 1 };
    assert_eq!(o.status.code(), Some(expected));
}
