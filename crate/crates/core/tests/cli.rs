use std::path::Path;
use std::process::{Command, Output};

fn pptseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pptseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn synth(dir: &Path) {
    let out = pptseg(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--scans-per-platform",
        "1",
        "--points",
        "300",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = pptseg(&["eval", "--manifest", "x.txt"]);
    assert_eq!(code(&out), 2);

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "precision = \"f32\"\nlearning_rate = 3\n").unwrap();
    let out = pptseg(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn language_alignment_without_embedding_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("run.toml");
    let out = pptseg(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--alignment",
        "la",
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_files_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = pptseg(&[
        "inspect-checkpoint",
        dir.path().join("nope.pptc").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    let out = pptseg(&[
        "stats",
        "--manifest",
        dir.path().join("nope.txt").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn stats_fractions_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let tax = dir.path().join("taxonomy.toml");
    let manifest = dir.path().join("train.txt");
    let out = pptseg(&[
        "stats",
        "--manifest",
        manifest.to_str().unwrap(),
        "--taxonomy",
        tax.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let total: f64 = text
        .lines()
        .skip(1)
        .filter_map(|l| l.trim().strip_suffix('%'))
        .map(|l| l.rsplit(' ').next().unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 100.0).abs() < 1e-2, "{text}");
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("run.toml");
    let out = pptseg(&["train", "--config", cfg.to_str().unwrap(), "--epochs", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("epoch=2"), "{stdout}");

    let ck = dir.path().join("run/checkpoint.pptc");
    let log = std::fs::read_to_string(dir.path().join("run/metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let report = dir.path().join("report.txt");
    let out = pptseg(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--manifest",
        dir.path().join("val.txt").to_str().unwrap(),
        "--taxonomy",
        dir.path().join("taxonomy.toml").to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    for platform in ["car", "alice", "spot", "all"] {
        assert!(table.contains(platform), "{table}");
    }
    let kv = std::fs::read_to_string(report).unwrap();
    assert!(kv.lines().any(|l| l.starts_with("all.miou=")), "{kv}");

    let out = pptseg(&["inspect-checkpoint", ck.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8(out.stdout).unwrap().contains("epoch: 2"));
}
