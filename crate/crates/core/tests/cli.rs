mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::workspace_root;
use funnel_recovery::ren::{save_checkpoint, Activation};
use funnel_recovery::{Ren, RenSpec};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_funnel-recovery")).args(args).current_dir(workspace_root()).output().expect("spawn CLI")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/epoch1").join(name).display().to_string()
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&cli(&["--help"])), 0);
}

#[test]
fn unknown_subcommand_exits_two() {
    assert_eq!(code(&cli(&["frobnicate"])), 2);
}

#[test]
fn alpha_above_one_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(workspace_root().join("configs/microgrid.toml")).unwrap();
    let bad = text.replace("alpha = 0.9", "alpha = 1.5");
    assert_ne!(bad, text);
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, bad).unwrap();
    let out = cli(&["run", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_config_exits_two() {
    assert_eq!(code(&cli(&["run", "does/not/exist.toml"])), 2);
}

#[test]
fn epochs_override_out_of_range_exits_two() {
    assert_eq!(code(&cli(&["run", "configs/microgrid.toml", "--epochs", "9"])), 2);
}

#[test]
fn zero_ren_checkpoint_is_certified() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zero.toml");
    let p = Ren::zeros(4, 4, 2, Activation::Tanh);
    let s = RenSpec::l2_gain(4, 4, 2, 1.0, 1.0).unwrap();
    save_checkpoint(&path, &p, &s).unwrap();
    let out = cli(&["check-iqc", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("certified true"));
}

#[test]
fn uncertified_checkpoint_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.toml");
    let mut p = Ren::zeros(2, 2, 2, Activation::Tanh);
    p.d22 = nalgebra::DMatrix::identity(2, 2) * 5.0;
    let s = RenSpec::l2_gain(2, 2, 2, 1.0, 1.0).unwrap();
    save_checkpoint(&path, &p, &s).unwrap();
    assert_eq!(code(&cli(&["check-iqc", path.to_str().unwrap()])), 1);
}

#[test]
fn fixture_checkpoint_is_certified() {
    assert_eq!(code(&cli(&["check-iqc", &fixture("ren_checkpoint.toml")])), 0);
}

#[test]
fn verify_accepts_fixture_trace() {
    let out = cli(&["verify", &fixture("trace.csv")]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{text}");
    for suite in ["monotone-t", "finite", "funnel-containment", "gain-sharing"] {
        assert!(text.contains(&format!("PASS {suite}")), "{text}");
    }
}

#[test]
fn verify_rejects_tampered_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = funnel_recovery::runner::read_trace(Path::new(&fixture("trace.csv"))).unwrap();
    rows[5].u_r[0] += 0.1;
    funnel_recovery::runner::write_trace(&dir.path().join("trace.csv"), &rows).unwrap();
    std::fs::copy(fixture("solutions.json"), dir.path().join("solutions.json")).unwrap();
    let out = cli(&["verify", dir.path().join("trace.csv").to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL gain-sharing"));
}

#[test]
fn one_epoch_run_matches_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = cli(&["run", "configs/microgrid.toml", "--epochs", "1", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let got = funnel_recovery::runner::read_trace(&out_dir.join("trace.csv")).unwrap();
    let want = funnel_recovery::runner::read_trace(Path::new(&fixture("trace.csv"))).unwrap();
    assert_eq!(got.len(), want.len());
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-6 * (1.0 + y.abs()));
    for (g, w) in got.iter().zip(&want) {
        assert!(close(&g.x, &w.x) && close(&g.u_r, &w.u_r) && close(&g.delta_hat, &w.delta_hat), "t={}", g.t);
        assert!((g.inv_r - w.inv_r).abs() <= 1e-6 * (1.0 + w.inv_r.abs()), "t={}", g.t);
        assert_eq!(g.flags, w.flags);
    }
}
