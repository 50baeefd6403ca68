use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use circtat_cli::io::read_array;

const BASE: &str = r#"
seed = 4

[grid]
half_width = 3.5
n = 65

[detector]
mode = "small"
big_r = 2.0
r = 0.8
n_theta = 16
n_alpha = 64

[time]
record = 3.0
plateau = 2.5
"#;

const DISC: &str = r#"
[[phantom.component]]
kind = "disc"
center = [0.1, -0.1]
radius = 0.3
taper = 0.15
"#;

fn circtat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_circtat")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run_ok(args: &[&str]) -> String {
    let out = circtat(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_exits_with_usage_code() {
    let out = circtat(&["forward", "--config", "/no/such/config.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config not found"));
}

#[test]
fn unknown_key_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &BASE.replace("n = 65", "n = 65\nspacing = 0.1"));
    let out = circtat(&["forward", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("spacing"));
}

#[test]
fn invalid_geometry_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &BASE.replace("r = 0.8", "r = 1.2"));
    let out_dir = dir.path().join("out");
    let out = circtat(&["forward", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("R − r ≥ 1"));
    assert!(!out_dir.exists());
}

#[test]
fn zero_phantom_gives_zero_sinogram_and_unit_error() {
    let dir = tempfile::tempdir().unwrap();
    let zero = write_config(dir.path(), "zero.toml", BASE);
    let truth = write_config(dir.path(), "truth.toml", &format!("{BASE}{DISC}"));
    let out = dir.path().join("out");
    run_ok(&["forward", "--config", s(&zero), "--out", s(&out)]);
    let sino = read_array(&out.join("sinogram.tarr")).unwrap();
    assert!(sino.dims[1] == 16 && sino.data.iter().all(|&v| v == 0.0));

    let rec = dir.path().join("rec");
    let stdout =
        run_ok(&["reconstruct", "--config", s(&truth), "--sinogram", s(&out.join("sinogram.tarr")), "--out", s(&rec)]);
    assert!(stdout.contains("relative L2 error 1.0000"), "{stdout}");
    let est = read_array(&rec.join("estimate.tarr")).unwrap();
    assert!(est.data.iter().all(|&v| v == 0.0));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(rec.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["relative_error"].as_f64(), Some(1.0));
}

#[test]
fn reconstruct_rejects_a_different_ring_radius() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.toml", &format!("{BASE}{DISC}"));
    let b = write_config(dir.path(), "b.toml", &format!("{BASE}{DISC}").replace("r = 0.8", "r = 0.7"));
    let out = dir.path().join("out");
    run_ok(&["forward", "--config", s(&a), "--out", s(&out)]);
    let res =
        circtat(&["reconstruct", "--config", s(&b), "--sinogram", s(&out.join("sinogram.tarr")), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&res.stderr);
    assert!(msg.contains("r = 0.8") && msg.contains("r = 0.7"), "{msg}");
}

#[test]
fn forward_and_reconstruct_recover_the_disc() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{BASE}{DISC}\n[recon]\nmethod = \"cg\"\niters = 15\n").replace("n_theta = 16", "n_theta = 60");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let out = dir.path().join("out");
    run_ok(&["forward", "--config", s(&cfg), "--out", s(&out)]);
    run_ok(&["reconstruct", "--config", s(&cfg), "--sinogram", s(&out.join("sinogram.tarr")), "--out", s(&out)]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let err = report["relative_error"].as_f64().unwrap();
    assert!(err < 0.3, "relative error {err}");
    let history = fs::read_to_string(out.join("residuals.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("iteration,misfit"));
    assert_eq!(history.lines().count(), 17);
}

#[test]
fn outputs_are_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{BASE}{DISC}\n[noise]\nrelative = 0.02\n");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let run = |threads: &str, seed: &str| -> PathBuf {
        let out = dir.path().join(format!("out-{threads}-{seed}"));
        run_ok(&["--threads", threads, "forward", "--config", s(&cfg), "--out", s(&out), "--seed", seed]);
        run_ok(&[
            "--threads",
            threads,
            "reconstruct",
            "--config",
            s(&cfg),
            "--sinogram",
            s(&out.join("sinogram.tarr")),
            "--out",
            s(&out),
            "--seed",
            seed,
        ]);
        out
    };
    let (a, b, c) = (run("1", "7"), run("3", "7"), run("1", "8"));
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 10);
    for name in &names {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name:?}");
    }
    assert_ne!(fs::read(a.join("sinogram.tarr")).unwrap(), fs::read(c.join("sinogram.tarr")).unwrap());
}

#[test]
fn visibility_of_zero_phantom_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", BASE);
    let out = dir.path().join("out");
    let res = circtat(&["visibility", "--config", s(&cfg), "--out", s(&out)]);
    assert!(res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("warning"));
    let csv = fs::read_to_string(out.join("visibility.csv")).unwrap();
    assert_eq!(csv.lines().collect::<Vec<_>>(), ["y_x,y_y,xi_x,xi_y,verdict,t,theta,branch"]);
}

#[test]
fn full_aperture_sees_every_edge() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{BASE}{DISC}\n[aperture]\ntimes = [0.0, 6.0]\n")
        .replace("[time]", "[speed]\nkind = \"constant\"\nc0 = 1.0\n\n[time]");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let out = dir.path().join("out");
    run_ok(&["visibility", "--config", s(&cfg), "--out", s(&out)]);
    let counts: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("visibility.json")).unwrap()).unwrap();
    assert!(counts["edges"].as_u64().unwrap() > 0);
    assert_eq!(counts["visible"], counts["edges"]);
    let (_, _, overlay) = circtat_cli::io::read_pgm(&out.join("overlay.pgm")).unwrap();
    assert_eq!(overlay.len(), 65 * 65);
    assert!(overlay.contains(&65535));
}

#[test]
fn partial_arc_splits_the_rim() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{BASE}{DISC}\n[aperture]\narc = [-1.5707963267948966, 0.0]\n");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let out = dir.path().join("out");
    run_ok(&["visibility", "--config", s(&cfg), "--out", s(&out)]);
    let counts: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("visibility.json")).unwrap()).unwrap();
    assert!(counts["visible"].as_u64().unwrap() > 0);
    assert!(counts["out_of_aperture"].as_u64().unwrap() > 0);
}

#[test]
fn selftest_quick_passes() {
    let stdout = run_ok(&["selftest", "--level", "quick"]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("check ")).count(), 5);
    assert!(stdout.lines().filter(|l| l.starts_with("check ")).all(|l| l.contains(" PASS: ")));
}

#[test]
fn broken_adjoint_fails_selftest() {
    let out = circtat(&["selftest", "--break-adjoint"]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("check adjoint FAIL"), "{stdout}");
    assert!(stdout.contains("check rays PASS"));
}

#[test]
fn sweep_without_section_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", BASE);
    let out = circtat(&["sweep", "--config", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[sweep]"));
}

#[test]
fn sweep_writes_one_row_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{}{DISC}\n[sweep]\nkind = \"large\"\nradius = 2.2\ndr = 0.1\ntheta_range = [-0.1, 0.1]\ndtheta = 0.05\nn_alpha = 64\nlevels = 2\nrecord = 1.5\n",
        BASE.replace("half_width = 3.5", "half_width = 4.0")
    );
    let cfg = write_config(dir.path(), "c.toml", &text);
    let out = dir.path().join("out");
    let stdout = run_ok(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(stdout.lines().count(), 2);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<_> = csv.lines().collect();
    assert_eq!(rows[0], "level,n,rms,ratio,rms_other_stencil");
    assert!(rows[2].starts_with("1,129,"));
}
