use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_persuade")).args(args).output().expect("spawn persuade")
}

fn json_of(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

fn write(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

// Small LCG so the fixtures do not depend on the library's generators.
struct Lcg(u64);

impl Lcg {
    fn unif(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    fn bern(&mut self, p: f64) -> u8 {
        u8::from(self.unif() < p)
    }
}

fn two_period_csv(n: usize) -> String {
    let mut r = Lcg(11);
    let mut out = String::from("y0,y1,d1,x1\n");
    for _ in 0..n {
        let x = r.bern(0.5);
        let d = r.bern(0.35 + 0.2 * x as f64);
        let y0 = r.bern(0.25 + 0.1 * x as f64);
        let y1 = if y0 == 1 { 1 } else { r.bern(0.1 + 0.35 * d as f64) };
        writeln!(out, "{y0},{y1},{d},{x}").unwrap();
    }
    out
}

fn staggered_csv(n: usize) -> String {
    let mut r = Lcg(5);
    let mut out = String::from("id,s,y0,y1,y2,y3\n");
    for i in 0..n {
        let s = ["1", "2", "3", "inf"][(r.unif() * 4.0) as usize];
        let ys: Vec<String> = (0..4)
            .map(|t| {
                let on = s.parse::<usize>().is_ok_and(|s| t >= s);
                r.bern(0.2 + 0.05 * t as f64 + if on { 0.3 } else { 0.0 }).to_string()
            })
            .collect();
        writeln!(out, "{i},{s},{}", ys.join(",")).unwrap();
    }
    out
}

fn close(v: &Value, want: f64, tol: f64) -> bool {
    (v.as_f64().unwrap() - want).abs() <= tol
}

#[test]
fn boe_worked_example() {
    let out = run(&["boe", "--att", "0.109", "--se", "0.041", "--q", "0.583", "--q-lower", "0.507", "--q-upper", "0.659"]);
    assert!(out.status.success());
    let v = json_of(&out);
    assert!(close(&v["aprt"]["point"], 0.158, 5e-4));
    assert!(close(&v["aprt"]["ci"][0], 0.039, 5e-4));
    assert!(close(&v["aprt"]["ci"][1], 0.300, 5e-4));
    assert!(close(&v["raprt"]["point"], 0.261, 5e-4));
    assert!(close(&v["raprt"]["ci"][0], 0.035, 5e-4));
    assert!(close(&v["raprt"]["ci"][1], 0.589, 5e-4));
}

#[test]
fn boe_without_q_is_rejected() {
    let out = run(&["boe", "--att", "0.1", "--se", "0.01"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn estimate_reports_every_requested_pair() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "panel.csv", &two_period_csv(600));
    let out = run(&["estimate", "--input", s(&input), "--x-cols", "x1", "--estimators", "fe,dr", "--targets", "aprt,raprt"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json_of(&out);
    let reports = v["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 4);
    for r in reports {
        let (lo, hi, p) = (r["ci"][0].as_f64().unwrap(), r["ci"][1].as_f64().unwrap(), r["point"].as_f64().unwrap());
        assert!(lo <= p && p <= hi);
        assert!(r["se"].as_f64().unwrap() > 0.0);
    }
    let shares = &v["type_shares"];
    let total: f64 = ["tp", "np", "ap"].iter().map(|k| shares[k].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert_eq!(v["config"]["subcommand"], "estimate");
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn missing_column_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "bad.csv", "y0,y1\n0,1\n1,1\n");
    let out = run(&["estimate", "--input", s(&input)]);
    assert_eq!(out.status.code(), Some(1));
    let v = json_of(&out);
    assert_eq!(v["error"]["code"], "MISSING_COLUMN");
    assert_eq!(v["error"]["context"]["column"], "d1");
}

#[test]
fn degenerate_denominator_is_a_numerical_error() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "flat.csv", "y0,y1,d1\n1,1,1\n1,1,0\n1,1,1\n1,1,0\n");
    let out = run(&["estimate", "--input", s(&input), "--estimators", "fe", "--targets", "aprt"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json_of(&out)["error"]["code"], "DEGENERATE_DENOMINATOR");
}

#[test]
fn unknown_flag_exits_with_invalid_input() {
    let out = run(&["estimate", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bounds_writes_membership() {
    let dir = TempDir::new().unwrap();
    let body = two_period_csv(300);
    let treated = body.lines().skip(1).filter(|l| l.split(',').nth(2) == Some("1")).count();
    let input = write(&dir, "panel.csv", &body);
    let members = dir.path().join("members.csv");
    let out = run(&["bounds", "--input", s(&input), "--nuisance", "cell_means", "--membership", s(&members)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&members).unwrap();
    // Header plus one row per treated unit.
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), treated + 1);
}

#[test]
fn staggered_csv_has_one_row_per_cohort_and_horizon() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "stag.csv", &staggered_csv(800));
    let out = run(&["staggered", "--input", s(&input), "--horizons", "-2..2", "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    // T = 3, eligible s in [max(1, -j), min(3, 3 - j)].
    let mut want = Vec::new();
    for j in -2i64..=2 {
        for s in 1.max(-j)..=3.min(3 - j) {
            want.push((s.to_string(), j.to_string(), "THETA_ST"));
        }
        want.push(("all".into(), j.to_string(), "ESPR"));
    }
    let got: Vec<(String, String, &str)> = rows.iter().map(|r| (r[0].to_string(), r[1].to_string(), r[2])).collect();
    assert_eq!(got, want);
    assert!(text.starts_with(&format!("# persuasion {}", env!("CARGO_PKG_VERSION"))));
    assert!(text.lines().nth(1).unwrap().starts_with("# config: "));
}

#[test]
fn simulate_summarises_each_estimator() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "sim.toml",
        r#"
n = 400
reps = 50
seed = 9

[dgp]
kind = "two_period"
propensity = [0.0]
g = [{ intercept = 0.3 }, { intercept = 0.3 }]
h = [{ intercept = 0.4 }, { intercept = 0.45 }]
persuasion = { intercept = 0.3 }

[[estimators]]
type = "fe"
target = "APRT"

[[estimators]]
type = "semipar"
estimator = "DR"
target = "RAPRT"
"#,
    );
    let out = run(&["simulate", "--config", s(&cfg), "--reps", "12"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json_of(&out);
    let results = v["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    for r in results {
        let sm = &r["summary"];
        for k in ["bias", "sd", "coverage", "rmse", "mean_se"] {
            assert!(sm[k].is_number(), "{k}");
        }
        assert_eq!(sm["reps"], 12);
    }
    assert!(close(&results[0]["summary"]["truth"], 0.3, 1e-12));
}

#[test]
fn outputs_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "panel.csv", &two_period_csv(400));
    let args = ["estimate", "--input", s(&input), "--x-cols", "x1", "--folds", "3", "--seed", "4"];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn out_flag_writes_file() {
    let dir = TempDir::new().unwrap();
    let dest = dir.path().join("boe.json");
    let out = run(&["boe", "--att", "0.1", "--se", "0.02", "--q", "0.6", "--out", s(&dest)]);
    assert!(out.status.success());
    let v: Value = serde_json::from_str(&fs::read_to_string(&dest).unwrap()).unwrap();
    assert_eq!(v["config"]["att"], 0.1);
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
}
