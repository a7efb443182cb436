use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mesic::cli_io::{read_csv, read_grid, sha256_hex};

fn mesic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mesic"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn short_coupled(dir: &Path) -> String {
    write(
        dir,
        "short.toml",
        "builtin = \"coupled-1d\"\nduration = 1.5625\n[outputs]\ncadence = 1\nsnapshot_every = 1\nprobes = [[5.0]]\n",
    )
}

#[test]
fn run_writes_a_verifiable_record() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_coupled(tmp.path());
    let out = tmp.path().join("run");
    let o = mesic(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.resolved", "trajectory.csv", "diagnostics.csv", "probes.csv", "MANIFEST"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(!out.join("ERROR").exists());

    let manifest = fs::read_to_string(out.join("MANIFEST")).unwrap();
    let mut listed = 0;
    for line in manifest.lines() {
        let (hash, rel) = line.split_once("  ").unwrap();
        assert_eq!(sha256_hex(&fs::read(out.join(rel)).unwrap()), hash, "{rel}");
        listed += 1;
    }
    assert!(listed > 5);

    let traj = read_csv(&out.join("trajectory.csv")).unwrap();
    assert_eq!(traj.rows.len(), 41);
    let snap = read_grid(&out.join("snapshots/t_000020.grid")).unwrap();
    assert_eq!(snap.dims, vec![256]);
    assert!((snap.time - 20.0 * 0.0390625).abs() < 1e-12);
    assert!(snap.field("phi").is_some() && snap.field("pi_plus").is_some());
}

#[test]
fn resolved_config_reproduces_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_coupled(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&mesic(&["run", "--config", &cfg, "--out", a.to_str().unwrap()])), 0);
    let resolved = a.join("config.resolved");
    let o = mesic(&["run", "--config", resolved.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read(a.join("MANIFEST")).unwrap(),
        fs::read(b.join("MANIFEST")).unwrap()
    );
}

#[test]
fn thread_count_changes_nothing_beyond_roundoff() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_coupled(tmp.path());
    let mut tables = Vec::new();
    for t in ["1", "3"] {
        let out = tmp.path().join(format!("t{t}"));
        let o = mesic(&["run", "--config", &cfg, "--threads", t, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        tables.push(read_csv(&out.join("trajectory.csv")).unwrap());
    }
    for (r1, r3) in tables[0].rows.iter().zip(&tables[1].rows) {
        for (x, y) in r1.iter().zip(r3) {
            assert!((x - y).abs() <= 1e-13 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn audit_sem_separates_pass_from_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_coupled(tmp.path());
    let out = tmp.path().join("run");
    assert_eq!(code(&mesic(&["run", "--config", &cfg, "--out", out.to_str().unwrap()])), 0);
    let o = mesic(&["audit-sem", "--run", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cons = read_csv(&out.join("conservation.csv")).unwrap();
    assert_eq!(cons.header, vec!["t", "P0", "P1"]);
    assert!(out.join("sem_divergence.csv").is_file());
    let o = mesic(&["audit-sem", "--run", out.to_str().unwrap(), "--tolerance-override", "1e-15"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn derive_check_reports_residuals() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("dc");
    let o = mesic(&["derive-check", "--scenario", "free-particle", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = read_csv(&out.join("variational_residuals.csv")).unwrap();
    assert!(t.column("relative").unwrap().iter().all(|&r| r <= 1e-6));
}

#[test]
fn studies_pass_on_their_scenarios() {
    for args in [
        &["dispersion"][..],
        &["yukawa", "--scenario", "yukawa-1d"][..],
        &["eta-check", "--scenario", "coupled-1d"][..],
    ] {
        let o = mesic(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn user_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let o = mesic(&["frobnicate"]);
    assert_eq!(code(&o), 2);

    let bad = write(tmp.path(), "bad.toml", "builtin = \"coupled-1d\"\n[physics\neps = 1\n");
    let o = mesic(&["run", "--config", &bad, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.toml:2:"), "{}", stderr(&o));

    let unknown = write(tmp.path(), "unknown.toml", "builtin = \"coupled-1d\"\n[physics]\ncharge = 1\n");
    let o = mesic(&["run", "--config", &unknown, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("charge"), "{}", stderr(&o));

    let cfl = write(tmp.path(), "cfl.toml", "builtin = \"coupled-1d\"\ndt = 0.15625\nduration = 10.0\n");
    let o = mesic(&["run", "--config", &cfl, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("CFL"), "{}", stderr(&o));

    let norm = write(
        tmp.path(),
        "norm.toml",
        "builtin = \"coupled-1d\"\n[suspension]\nlo = 0.0\nhi = 10.0\nscale = 2.0\n[suspension.shape]\nkind = \"uniform\"\n",
    );
    let o = mesic(&["run", "--config", &norm, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).to_lowercase().contains("normalization"), "{}", stderr(&o));

    let o = mesic(&["audit-sem", "--run", tmp.path().join("missing").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
