use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_airy-kam"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn missing_key_exits_1_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[truncation]\nM = 2\nK = 4\njmax = 8\n[problem]\nS = 1.0\n").unwrap();
    let o = run(&["solve"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("`c`"), "{}", text(&o));
    std::fs::write(&cfg, "omega = [1.3]\n[truncation]\nM = 1\nK = 2\njmax = 4\n").unwrap();
    let o = run(&["reduce"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("`operator`"));
}

#[test]
fn unreadable_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve"], &dir.path().join("nope.toml"), dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn zero_forcing_gives_trivial_solution() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve"], &fixture("solve_zero.toml"), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let sol: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("solution.json")).unwrap()).unwrap();
    assert_eq!(sol["entries"].as_array().unwrap().len(), 0);
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "step,s_n,sigma_n,norm_f_n,norm_h_n,residual,min_margin,seconds");
}

#[test]
fn small_forcing_fixture_converges() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve"], &fixture("solve_small.toml"), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(rep["final_residual"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn starved_solve_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text_cfg = std::fs::read_to_string(fixture("solve_small.toml"))
        .unwrap()
        .replace("residual_target = 1e-10", "residual_target = 1e-30")
        .replace("max_iters = 4", "max_iters = 1");
    let cfg = dir.path().join("starved.toml");
    std::fs::write(&cfg, text_cfg).unwrap();
    let o = run(&["solve"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn constant_coefficients_reduce_to_airy_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["reduce"], &fixture("reduce_constant.toml"), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let table = std::fs::read_to_string(dir.path().join("omega_table.csv")).unwrap();
    let mut rows = 0;
    for line in table.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        let j = f[0];
        assert_eq!(f[1], -j * j * j + 0.4 * j);
        assert_eq!(f[2], 0.0);
        rows += 1;
    }
    assert_eq!(rows, 16);
}

#[test]
fn cos_x_fixture_is_diagonalized() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["reduce"], &fixture("reduce_cosx.toml"), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(rep["summary"]["offdiag_residual"].as_f64().unwrap() <= 1e-8);
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,op_norm_p,min_margin,seconds\n"));
}

#[test]
fn resonant_reduce_prints_witness_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["reduce"], &fixture("reduce_resonant.toml"), dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("Melnikov witness"), "{}", text(&o));
}

#[test]
fn resonant_omega_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["check-omega"], &fixture("check_resonant.toml"), dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("witness: ℓ=[(1, -1)]"), "{}", text(&o));
}

#[test]
fn measure_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&["measure"], &fixture("measure.toml"), &a).status.code(), Some(0));
    assert_eq!(run(&["measure", "--seed", "42"], &fixture("measure.toml"), &b).status.code(), Some(0));
    for f in ["report.json", "measure.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let c = dir.path().join("c");
    assert_eq!(run(&["measure", "--seed", "43"], &fixture("measure.toml"), &c).status.code(), Some(0));
    assert_ne!(std::fs::read(a.join("measure.csv")).unwrap(), std::fs::read(c.join("measure.csv")).unwrap());
}

#[test]
fn selftest_passes() {
    let o = Command::new(env!("CARGO_BIN_EXE_airy-kam")).arg("selftest").output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert_eq!(text(&o).matches("PASS").count(), 6);
}
