//! End-to-end tests of the `difflab` binary: exit codes, artifact
//! structure, and thread-count independence of results.

use std::path::Path;
use std::process::Command;

fn difflab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_difflab"))
}

fn read_body(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    difflab::report::csv_body(&text).to_string()
}

#[test]
fn bad_config_file_exits_2() {
    let out = difflab()
        .args(["--config", "/definitely/not/here.cfg", "sample"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[run]\nseed = not-a-number\n").unwrap();
    let out = difflab()
        .args(["--config", cfg.to_str().unwrap()])
        .args(["--out", dir.path().to_str().unwrap()])
        .arg("sample")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("run.seed"), "{stderr}");
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = difflab().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_tolerance_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tol0.cfg");
    std::fs::write(
        &cfg,
        "[run]\ntolerance = 0\ntwo_step_tolerance = 0\nn = 2000\n",
    )
    .unwrap();
    let out = difflab()
        .args(["--config", cfg.to_str().unwrap()])
        .args(["--out", dir.path().to_str().unwrap()])
        .arg("verify-theory")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let body = read_body(&dir.path().join("verify_theory.csv"));
    assert!(body.lines().any(|l| l.ends_with(",fail")), "{body}");
}

#[test]
fn verify_theory_passes_at_default_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fast.cfg");
    // smaller n than the default so the test stays quick; tolerances stay
    // at their defaults
    std::fs::write(&cfg, "[run]\nn = 20000\n").unwrap();
    let out = difflab()
        .args(["--config", cfg.to_str().unwrap()])
        .args(["--out", dir.path().to_str().unwrap()])
        .arg("verify-theory")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    let body = read_body(&dir.path().join("verify_theory.csv"));
    assert!(body.lines().skip(1).all(|l| l.ends_with(",pass")), "{body}");
}

#[test]
fn sample_writes_chain_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sample.cfg");
    std::fs::write(&cfg, "[run]\nn = 8\n").unwrap();
    let out = difflab()
        .args(["--config", cfg.to_str().unwrap()])
        .args(["--out", dir.path().to_str().unwrap()])
        .args(["--seed", "9"])
        .arg("sample")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    let text = std::fs::read_to_string(dir.path().join("chains.csv")).unwrap();
    let header = difflab::report::parse_config_header(&text);
    assert_eq!(
        header.iter().find(|(k, _)| k == "run.seed").map(|(_, v)| v.as_str()),
        Some("9")
    );
    let body = difflab::report::csv_body(&text);
    // 8 chains over the default 20-step grid: one row per (chain, state)
    assert_eq!(body.lines().count(), 1 + 8 * 21);
}

/// Worker thread count must never change any numerical output, only wall
/// time. Compare full CSV bodies byte for byte across thread counts.
#[test]
fn results_are_thread_count_independent() {
    let dir1 = tempfile::tempdir().unwrap();
    let dir4 = tempfile::tempdir().unwrap();
    let cfg = dir1.path().join("bias.cfg");
    // n spans several shards so parallel splits actually occur
    std::fs::write(&cfg, "[run]\nn = 5000\nseed = 42\n").unwrap();
    for (threads, dir) in [("1", dir1.path()), ("4", dir4.path())] {
        let out = difflab()
            .args(["--config", cfg.to_str().unwrap()])
            .args(["--threads", threads])
            .args(["--out", dir.to_str().unwrap()])
            .arg("bias")
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{:?}", out);
    }
    for name in ["bias_multi.csv", "bias_single.csv"] {
        let a = read_body(&dir1.path().join(name));
        let b = read_body(&dir4.path().join(name));
        assert_eq!(a, b, "{name} differs between thread counts");
        assert!(a.lines().count() > 2);
    }
}

#[test]
fn norms_inverts_applied_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("norms.cfg");
    std::fs::write(
        &cfg,
        "[run]\nn = 4000\n\n[sampler]\nlambda = uniform:1.03\n",
    )
    .unwrap();
    let out = difflab()
        .args(["--config", cfg.to_str().unwrap()])
        .args(["--out", dir.path().to_str().unwrap()])
        .arg("norms")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("fitted lambda(t)"), "{stdout}");
    assert!(dir.path().join("norms.svg").exists());
    assert!(dir.path().join("norm_ratio.csv").exists());
}
