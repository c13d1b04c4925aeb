use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn duet() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_duet"));
    // keep the caller's environment from leaking flags into the runs
    for (k, _) in std::env::vars() {
        if k.starts_with("PENCIL_") {
            cmd.env_remove(k);
        }
    }
    cmd
}

fn mnist() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn ok(mut cmd: Command) -> Output {
    let out = cmd.output().expect("spawn duet");
    assert!(
        out.status.success(),
        "duet failed ({}):\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn value(text: &str, key: &str) -> Option<String> {
    text.lines().find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn free_addr() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    format!("127.0.0.1:{}", l.local_addr().unwrap().port())
}

const SMALL_RUN: &[&str] = &[
    "train", "--params", "small", "--mode", "prep", "--batch", "8", "--steps", "2", "--train-limit", "16",
    "--masks-m", "2", "--trunc", "approx", "--transcript", "--seed", "4",
];

#[test]
fn hardness_prints_the_standard_table() {
    let out = stdout(&ok({
        let mut c = duet();
        c.arg("hardness");
        c
    }));
    for row in [
        "m=2 f=10: 20 bits, <512, 62.1 seconds",
        "m=2 f=25: 50 bits, <512, 2114 years",
        "m=4 f=25: 100 bits, ~2048, 2.38e18 years",
        "m=8 f=25: 200 bits, ~7680, 3.02e48 years",
    ] {
        assert!(out.contains(row), "missing {row} in\n{out}");
    }
}

#[test]
fn flags_beat_environment_beats_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "# bound inputs\nepsilon = 2\ndelta=1e-3\nrecords=1000\n").unwrap();
    let sigma = |extra: &[&str], env: &[(&str, &str)]| {
        let mut c = duet();
        c.args(["dp-bound", "--config"]).arg(&cfg).args(extra);
        for (k, v) in env {
            c.env(k, v);
        }
        value(&stdout(&ok(c)), "sigma").unwrap().parse::<f64>().unwrap()
    };
    let from_file = sigma(&[], &[]);
    let from_env = sigma(&[], &[("PENCIL_EPSILON", "4")]);
    let from_flag = sigma(&["--epsilon", "8"], &[("PENCIL_EPSILON", "4")]);
    assert!((from_file / from_env - 2.0).abs() < 1e-9, "{from_file} {from_env}");
    assert!((from_env / from_flag - 2.0).abs() < 1e-9, "{from_env} {from_flag}");
}

#[test]
fn malformed_config_line_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "epsilon 2\n").unwrap();
    let out = duet().args(["dp-bound", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok({
        let mut c = duet();
        c.args(["selftest", "--out"]).arg(dir.path());
        c
    });
    assert_eq!(value(&stdout(&out), "pass").as_deref(), Some("true"));
    assert_eq!(report(dir.path())["fields"]["pass"], true);
}

#[test]
fn simulate_is_deterministic_and_writes_a_manifest() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut c = duet();
        c.args([
            "simulate", "--epochs", "1", "--train-limit", "512", "--test-limit", "200", "--batch", "32", "--out",
        ])
        .arg(dir.path())
        .arg("--data")
        .arg(mnist());
        let text = stdout(&ok(c));
        let manifest: Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        (value(&text, "final_accuracy").unwrap(), manifest, dir)
    };
    let (acc1, m1, _d1) = run();
    let (acc2, m2, _d2) = run();
    assert_eq!(acc1, acc2);
    for k in ["command", "config", "seeds", "digests", "outputs"] {
        assert!(m1.get(k).is_some(), "manifest lacks {k}");
    }
    assert!(m1["digests"]["model"].is_string());
    assert_eq!(m1["digests"]["model"], m2["digests"]["model"]);
}

#[test]
fn local_and_tcp_runs_have_identical_transcripts() {
    let local = tempfile::tempdir().unwrap();
    let mut c = duet();
    c.args(SMALL_RUN).args(["--role", "local", "--out"]).arg(local.path()).arg("--data").arg(mnist());
    let text = stdout(&ok(c));
    assert!(text.lines().any(|l| l.starts_with("do.final_loss=")), "{text}");

    let tcp = tempfile::tempdir().unwrap();
    let addr = free_addr();
    let mo = duet()
        .args(SMALL_RUN)
        .args(["--role", "mo", "--listen", &addr, "--out"])
        .arg(tcp.path().join("mo"))
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut d = duet();
    d.args(SMALL_RUN)
        .args(["--role", "do", "--connect", &addr, "--out"])
        .arg(tcp.path().join("do"))
        .arg("--data")
        .arg(mnist());
    ok(d);
    let mo = mo.wait_with_output().unwrap();
    assert!(mo.status.success(), "{}", String::from_utf8_lossy(&mo.stderr));

    for role in ["mo", "do"] {
        let a = report(&local.path().join(role));
        let b = report(&tcp.path().join(role));
        assert!(a["fields"]["transcript_sha256"].as_str().is_some_and(|d| d.len() == 64), "{role} digest missing");
        assert!(a["fields"]["online_bytes"].as_u64().is_some_and(|n| n > 0));
        assert_eq!(a["fields"]["transcript_sha256"], b["fields"]["transcript_sha256"], "{role} transcript");
        assert_eq!(a["fields"]["online_bytes"], b["fields"]["online_bytes"], "{role} online bytes");
    }
    let d = report(&local.path().join("do"));
    assert_eq!(d["fields"]["online_ciphertext_frames"], 0);
    assert_eq!(d["fields"]["steps"], 2);
}

#[test]
fn prep_banks_can_be_stored_and_reused() {
    let dir = tempfile::tempdir().unwrap();
    let banks = dir.path().join("banks");
    let mut prep = duet();
    prep.arg("prep")
        .args(&SMALL_RUN[1..])
        .args(["--role", "local", "--bank-dir"])
        .arg(&banks)
        .arg("--out")
        .arg(dir.path().join("prep"))
        .arg("--data")
        .arg(mnist());
    ok(prep);
    assert!(std::fs::read_dir(&banks).unwrap().count() > 0);
    let mut train = duet();
    train
        .args(SMALL_RUN)
        .args(["--role", "local", "--bank-dir"])
        .arg(&banks)
        .arg("--out")
        .arg(dir.path().join("train"))
        .arg("--data")
        .arg(mnist());
    ok(train);
    let d = report(&dir.path().join("train/do"));
    assert_eq!(d["fields"]["offline_ciphertext_frames"], 0);
    assert_eq!(d["fields"]["steps"], 2);
}
