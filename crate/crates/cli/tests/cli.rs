use fsicloud::output::{list_files, read_energy_csv, read_norm_csv, read_study_csv};
use std::path::Path;
use std::process::{Command, Output};

fn fsicloud(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsicloud")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const RUN: &str = r#"
[grid]
nx = 32

[fluid]
potential = { kind = "newtonian", mu = 1e-3 }
g = [0.0, -1.0]

[time]
T = 0.02
dt = 4e-3
snapshot_every = 2

[[bodies]]
center = [0.5, 0.6]
radius = 0.1
density = 2.0
"#;

const STUDY: &str = r#"
[grid]
nx = 32

[fluid]
potential = { kind = "power_law", alpha = 1e-3, beta = 2e-5, p = 3.0 }

[time]
T = 0.02
dt = 4e-3
snapshot_every = 5

[study]
N_list = [0, 1, 2]
"#;

#[test]
fn missing_config_is_a_usage_error() {
    let o = fsicloud(&["run", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--config"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(fsicloud(&["simulate"]).status.code(), Some(1));
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(fsicloud(&["--help"]).status.code(), Some(0));
    assert_eq!(fsicloud(&["--version"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &RUN.replace("nx = 32", "nx = 32\nnz = 4"));
    let out = dir.path().join("out");
    let o = fsicloud(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("grid.nz"), "{}", stderr(&o));
}

#[test]
fn unreadable_config_exits_with_one() {
    let o = fsicloud(&["study", "--config", "/nonexistent/c.toml", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    // A step far beyond the viscous limit.
    let cfg = write(dir.path(), "c.toml", &RUN.replace("mu = 1e-3", "mu = 10.0"));
    let out = dir.path().join("out");
    let o = fsicloud(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("CFL"));
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("status: failed"));
}

#[test]
fn run_writes_energy_snapshots_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", RUN);
    let out = dir.path().join("out");
    let o = fsicloud(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let energy = read_energy_csv(&out.join("energy.csv")).unwrap();
    assert_eq!(energy.len(), 6);
    assert!(energy.iter().skip(1).all(|r| r.work != 0.0));
    let files: Vec<String> = list_files(&out).unwrap().into_iter().map(|(f, _)| f).collect();
    for f in ["config.toml", "energy.csv", "manifest.txt", "snapshots/rho_000000.txt", "snapshots/uy_000004.txt"] {
        assert!(files.iter().any(|x| x == f), "missing {f} in {files:?}");
    }
    assert!(!files.iter().any(|x| x == "snapshots/rho_000005.txt"));
}

fn study(out: &Path, cfg: &str) -> Output {
    fsicloud(&["study", "--config", cfg, "--out", out.to_str().unwrap()])
}

#[test]
fn study_writes_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", STUDY);
    let out = dir.path().join("out");
    let o = study(&out, &cfg);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_study_csv(&out.join("study.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert_eq!(rows[0].err_l2, 0.0);
    assert_eq!(rows[0].err_grad_lp, 0.0);
    assert!(rows[1].err_l2 > 0.0);
    let files: Vec<String> = list_files(&out).unwrap().into_iter().map(|(f, _)| f).collect();
    for f in [
        "config.toml",
        "manifest.txt",
        "study.csv",
        "reference/energy.csv",
        "reference/snapshots/ux_000005.txt",
        "run_N000/energy.csv",
        "run_N001/energy.csv",
        "run_N002/energy.csv",
        "run_N002/snapshots/rho_000000.txt",
    ] {
        assert!(files.iter().any(|x| x == f), "missing {f} in {files:?}");
    }
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("max_feasible_N:"));
    assert!(manifest.contains("  study.csv "));
}

#[test]
fn study_output_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", STUDY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(study(&a, &cfg).status.success());
    assert!(study(&b, &cfg).status.success());
    let fa = list_files(&a).unwrap();
    assert_eq!(fa, list_files(&b).unwrap());
    for (f, _) in fa.iter().filter(|(f, _)| f != "manifest.txt") {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn check_operators_writes_a_norm_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ops");
    let o = fsicloud(&["check-operators", "--trials", "3", "--grid", "64", "--radii", "0.04,0.08", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_norm_csv(&out.join("norms.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][2], 0.04);
    assert!(rows.iter().all(|r| r[4] >= 1.0 && r[5] >= 1.0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("ratio_W spread") && text.contains("A1"), "{text}");
    assert_eq!(text.matches("properties N = ").count(), 3, "{text}");
    assert!(!text.contains("VIOLATED"));
}

#[test]
fn check_operators_rejects_zero_trials() {
    let o = fsicloud(&["check-operators", "--trials", "0", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn capacity_writes_one_row_per_probe() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cap");
    let o = fsicloud(&["capacity", "--grid", "64", "--p", "2,3", "--radii", "0.12,0.06", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("capacity.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "p,r,capacity,newton_iterations");
    assert_eq!(lines.len(), 5);
}
