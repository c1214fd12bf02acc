use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_hawkes-lab");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn write_config(dir: &TempDir, text: &str) -> PathBuf {
    let p = dir.path().join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(BIN).arg(cmd).arg("--config").arg(config).arg("--out").arg(out).args(extra).output().unwrap()
}

fn run_ok(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let o = run(cmd, config, out, extra);
    assert!(o.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let (header, rows) = read_csv(path);
    let i = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name} in {header:?}"));
    rows.iter().map(|r| r[i].parse().unwrap()).collect()
}

fn scalar_exp_kernel(a: f64) -> String {
    format!(r#"{{ "d": 1, "entries": [{{ "family": "exponential", "a": {a}, "b": 1.0 }}] }}"#)
}

#[test]
fn resolvent_matches_closed_form() {
    let out = TempDir::new().unwrap();
    run_ok("resolvent", &configs().join("resolvent_exponential.json"), out.path(), &[]);
    let file = out.path().join("resolvent.csv");
    let (t, r) = (column(&file, "t"), column(&file, "R_0_0"));
    assert_eq!(t.len(), 5001);
    let err = t.iter().zip(&r).map(|(t, r)| (r - 0.5 * (-0.5 * t).exp()).abs()).fold(0.0, f64::max);
    assert!(err <= 5e-4, "{err}");
    let ir = column(&file, "I_R_0_0");
    assert!((ir[5000] - (1.0 - (-2.5f64).exp())).abs() < 1e-3);
}

#[test]
fn zero_kernel_gives_zero_resolvent() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, r#"{"grid": {"delta": 0.01, "horizon": 1}, "resolvent": {"kernel": {"d": 2, "entries": [
        {"family": "zero"}, {"family": "zero"}, {"family": "zero"}, {"family": "zero"}]}}}"#);
    run_ok("resolvent", &cfg, dir.path(), &[]);
    let (header, rows) = read_csv(&dir.path().join("resolvent.csv"));
    assert_eq!(header.len(), 9);
    assert!(rows.iter().all(|r| r[1..].iter().all(|x| x.parse::<f64>().unwrap() == 0.0)));
}

#[test]
fn near_critical_kernel_warns() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &format!(r#"{{"grid": {{"delta": 0.01, "horizon": 5}}, "resolvent": {{"kernel": {}}}}}"#, scalar_exp_kernel(0.9995)));
    let o = run_ok("resolvent", &cfg, dir.path(), &[]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert!(column(&dir.path().join("resolvent_residual.csv"), "laplace_residual").iter().all(|x| x.is_finite()));
}

fn fl_config(cases: &str, paths: usize) -> String {
    format!(
        r#"{{"seed": 5, "grid": {{"delta": 0.01, "horizon": 2}}, "fl_verify": {{"kernel": {}, "mu": {{"family": "constant", "mu": [1.0]}},
        "paths": {paths}, "cases": [{cases}]}}}}"#,
        scalar_exp_kernel(0.5)
    )
}

#[test]
fn fl_verify_zero_test_functions_have_zero_score() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &fl_config(r#"{"f": {"form": "zero"}, "h": {"form": "zero"}, "horizon": 2}"#, 10));
    run_ok("fl-verify", &cfg, dir.path(), &[]);
    assert_eq!(column(&dir.path().join("fl_verify.csv"), "z_score"), vec![0.0]);
}

#[test]
fn fl_verify_default_config_and_sweep() {
    let out = TempDir::new().unwrap();
    run_ok("fl-verify", &configs().join("fl_verify_scalar.json"), out.path(), &[]);
    assert!(column(&out.path().join("fl_verify.csv"), "z_score").iter().all(|z| z.abs() <= 3.0));
    assert!(read_csv(&out.path().join("events.csv")).1.len() > 10);

    let dir = TempDir::new().unwrap();
    let cases: Vec<String> = [0.5, 1.0, 2.0]
        .iter()
        .map(|a| format!(r#"{{"f": {{"form": "constant", "re": -0.3}}, "h": {{"form": "constant", "im": {a}}}, "horizon": 2}}"#))
        .collect();
    let cfg = write_config(&dir, &fl_config(&cases.join(","), 8000));
    run_ok("fl-verify", &cfg, dir.path(), &[]);
    let z = column(&dir.path().join("fl_verify.csv"), "z_score");
    assert_eq!(z.len(), 3);
    assert!(z.iter().all(|z| z.abs() <= 3.0), "{z:?}");
}

fn scaling_config(n: &str, f: &str, h: &str) -> String {
    format!(
        r#"{{"grid": {{"delta": 0.001, "horizon": 2}}, "scaling_study": {{"family": {{"family": "exponential", "a_mu": 1, "b": 0.5, "c": 1}},
        "n": {n}, "f": {f}, "h": {h}}}}}"#
    )
}

#[test]
fn scaling_study_gaps_decrease() {
    let out = TempDir::new().unwrap();
    run_ok("scaling-study", &configs().join("scaling_exponential.json"), out.path(), &[]);
    let gap = column(&out.path().join("scaling_study.csv"), "gap");
    assert_eq!(gap.len(), 3);
    assert!(gap[1] < gap[0] && gap[2] < gap[1] && gap[2] <= 5e-2, "{gap:?}");
}

#[test]
fn scaling_study_edge_cases() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &scaling_config("[1000]", r#"{"form": "constant", "re": -0.5}"#, r#"{"form": "zero"}"#));
    run_ok("scaling-study", &cfg, dir.path(), &[]);
    assert_eq!(read_csv(&dir.path().join("scaling_study.csv")).1.len(), 1);

    let cfg = write_config(&dir, &scaling_config("[10, 100]", r#"{"form": "zero"}"#, r#"{"form": "zero"}"#));
    run_ok("scaling-study", &cfg, dir.path(), &[]);
    assert!(column(&dir.path().join("scaling_study.csv"), "gap").iter().all(|g| *g == 0.0));
}

#[test]
fn scaling_study_rejects_inadmissible_target() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        r#"{"grid": {"delta": 0.01, "horizon": 1}, "scaling_study": {"family": {"family": "ebf",
        "f": {"d": 1, "b": [[0.5]], "sigma": [[1.0]]}, "a": [[0.5]], "mu": [1.0]}, "n": [10],
        "f": {"form": "zero"}, "h": {"form": "zero"}}}"#,
    );
    let o = run("scaling-study", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("admissible"));
}

#[test]
fn sve_rough_cir_mean_audit() {
    let out = TempDir::new().unwrap();
    run_ok("sve", &configs().join("sve_rough_cir.json"), out.path(), &[]);
    let file = out.path().join("sve_summary.csv");
    let z = column(&file, "z_mean");
    assert_eq!(z.len(), 101);
    assert!(z[50] <= 3.0 && z[100] <= 3.0, "{} {}", z[50], z[100]);
    let (_, rows) = read_csv(&out.path().join("sve_trajectories.csv"));
    assert_eq!(rows.len(), 20 * 101);
}

#[test]
fn sve_without_noise_reproduces_the_baseline() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        r#"{"grid": {"delta": 0.01, "horizon": 1}, "sve": {"paths": 3, "scheme": {"scheme": "density",
        "measure": {"family": "zero", "d": 1}, "upsilon_rate": [2.0]}}}"#,
    );
    run_ok("sve", &cfg, dir.path(), &[]);
    let file = dir.path().join("sve_trajectories.csv");
    let (t, xi) = (column(&file, "t"), column(&file, "xi_integrated"));
    assert_eq!(t.len(), 3 * 101);
    assert!(t.iter().zip(&xi).all(|(t, x)| (x - 2.0 * t).abs() < 1e-12));
}

#[test]
fn runs_are_reproducible_and_thread_independent() {
    let cfg = configs().join("sve_rough_cir.json");
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    run_ok("sve", &cfg, a.path(), &["--threads", "1"]);
    run_ok("sve", &cfg, b.path(), &["--threads", "4"]);
    for f in ["sve_trajectories.csv", "sve_summary.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let c = TempDir::new().unwrap();
    run_ok("sve", &cfg, c.path(), &["--seed", "74"]);
    assert_ne!(std::fs::read(a.path().join("sve_trajectories.csv")).unwrap(), std::fs::read(c.path().join("sve_trajectories.csv")).unwrap());
}

fn potential_config(b: f64, sigma: f64, methods: &str) -> String {
    format!(r#"{{"grid": {{"delta": 0.001, "horizon": 2}}, "potential": {{"ebf": {{"d": 1, "b": [[{b}]], "sigma": [[{sigma}]]}}, "methods": {methods}}}}}"#)
}

fn summary_value(dir: &Path, key: &str) -> String {
    let (_, rows) = read_csv(&dir.join("potential_summary.csv"));
    rows.into_iter().find(|r| r[0] == key).unwrap_or_else(|| panic!("no {key}"))[1].clone()
}

#[test]
fn potential_lebesgue_and_affine_cases() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &potential_config(0.0, 1.0, r#"["closed_form", "gs"]"#));
    run_ok("potential", &cfg, dir.path(), &[]);
    let file = dir.path().join("potential.csv");
    let (t, pi) = (column(&file, "t"), column(&file, "closed_form_0_0"));
    assert!(t.iter().zip(&pi).all(|(t, p)| (t - p).abs() < 1e-12));
    assert_eq!(summary_value(dir.path(), "criticality"), "critical");

    let out = TempDir::new().unwrap();
    run_ok("potential", &configs().join("potential_affine.json"), out.path(), &[]);
    let gap: f64 = summary_value(out.path(), "gap_gs_resolvent_eq").parse().unwrap();
    assert!(gap <= 1e-3, "{gap}");
}

#[test]
fn positive_drift_is_subcritical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &potential_config(0.3, 1.0, r#"["resolvent_eq"]"#));
    run_ok("potential", &cfg, dir.path(), &[]);
    assert_eq!(summary_value(dir.path(), "criticality"), "subcritical");
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "{\n  \"grid\": {\"delta\": -1, \"horizon\": 1}\n}");
    let o = run("resolvent", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid.delta"));

    let cfg = write_config(&dir, "{\n  \"grid\": {\"delta\": 0.1, \"horizon\": 1},\n  \"resolvent\": {\"kernel\": 3}\n}");
    let o = run("resolvent", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    let cfg = write_config(&dir, r#"{"grid": {"delta": 0.1, "horizon": 1}}"#);
    assert_eq!(run("sve", &cfg, dir.path(), &[]).status.code(), Some(2));
}

#[test]
fn exploding_process_is_a_numerical_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        &format!(
            r#"{{"grid": {{"delta": 0.01, "horizon": 20}}, "fl_verify": {{"kernel": {}, "mu": {{"family": "constant", "mu": [1.0]}},
            "paths": 1, "cases": [{{"f": {{"form": "constant", "re": -0.1}}, "h": {{"form": "zero"}}, "horizon": 20}}]}}}}"#,
            scalar_exp_kernel(3.0)
        ),
    );
    assert_eq!(run("fl-verify", &cfg, dir.path(), &[]).status.code(), Some(3));
}
