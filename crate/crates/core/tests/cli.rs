use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sag"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("sag binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Small basin written by the CLI itself.
fn synth(dir: &Path) {
    let out = sag(&["synth", "--out", p(dir), "--segments", "9", "--reservoirs", "1", "--days", "60", "--seed", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
}

const QUICK: [&str; 6] = ["--epochs", "2", "--forecaster-epochs", "2", "--hidden", "3"];

fn train(data: &Path, out: &Path, variant: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(data), "--variant", variant, "--out", p(out)];
    args.extend(QUICK);
    args.extend(extra);
    sag(&args)
}

#[test]
fn synth_writes_every_table_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    synth(&data);
    for f in [
        "edges.csv",
        "drivers.csv",
        "observations.csv",
        "reservoir_meta.csv",
        "release.csv",
        "profiles.csv",
        "truth.csv",
        "config.toml",
    ] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let echoed = fs::read_to_string(data.join("config.toml")).unwrap();
    assert!(echoed.contains("n_segments = 9"));
}

#[test]
fn synth_rejects_bad_config_and_unwritable_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = sag(&["synth", "--out", p(&dir.path().join("x")), "--segments", "0"]);
    assert_eq!(code(&out), 2);

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[synth]\nsegments = 4\n").unwrap();
    assert_eq!(code(&sag(&["synth", "--config", p(&cfg), "--out", p(&dir.path().join("y"))])), 2);

    let blocker = dir.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let out = sag(&["synth", "--out", p(&blocker.join("sub")), "--segments", "3", "--reservoirs", "1", "--days", "20"]);
    assert_eq!(code(&out), 3);

    assert_eq!(code(&sag(&["synth", "--config", p(&dir.path().join("missing.toml")), "--out", p(dir.path())])), 3);
}

#[test]
fn train_is_reproducible_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    synth(&data);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = train(&data, out, "sag-sim", &["--seed", "3"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(o.stdout.is_empty());
    }
    for f in ["checkpoint.json", "history.csv", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,stage,train_loss\n"));
}

#[test]
fn train_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    synth(&data);

    let bare = dir.path().join("bare");
    fs::create_dir(&bare).unwrap();
    for f in ["edges.csv", "drivers.csv", "observations.csv", "reservoir_meta.csv"] {
        fs::copy(data.join(f), bare.join(f)).unwrap();
    }
    assert_eq!(code(&train(&bare, &dir.path().join("o1"), "sag-sim", &[])), 4);
    // the PP variant needs nothing from the release tables
    assert_eq!(code(&train(&bare, &dir.path().join("o2"), "sag-pp", &[])), 0);

    assert_eq!(code(&train(&data, &dir.path().join("o3"), "sag-nope", &[])), 2);
    assert_eq!(code(&train(&data, &dir.path().join("o4"), "rnn", &["--learning-rate", "1e300"])), 5);
}

#[test]
fn seeds_fan_out_into_subdirectories() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    synth(&data);
    let out = dir.path().join("multi");
    let mut args = vec!["train", "--data", p(&data), "--variant", "rnn", "--out", p(&out), "--seeds", "1,2"];
    args.extend(QUICK);
    let o = Command::new(env!("CARGO_BIN_EXE_sag"))
        .args(&args)
        .env("SAG_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let single = dir.path().join("single");
    assert_eq!(code(&train(&data, &single, "rnn", &["--seed", "2"])), 0);
    let multi_ck = fs::read_to_string(out.join("seed_2/checkpoint.json")).unwrap();
    assert_eq!(multi_ck, fs::read_to_string(single.join("checkpoint.json")).unwrap());
    assert!(out.join("seed_1/history.csv").is_file());
}

#[test]
fn eval_reports_and_rejects_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    synth(&data);
    let run = dir.path().join("run");
    assert_eq!(code(&train(&data, &run, "sag-pp", &["--seed", "1"])), 0);
    let ck = run.join("checkpoint.json");

    let report = dir.path().join("report");
    let o = sag(&["eval", "--data", p(&data), "--checkpoint", p(&ck), "--out", p(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("variant,scope,mean_rmse,std_rmse\nsag-pp,all,"));
    assert!(report.join("report.csv").is_file());
    assert_eq!(fs::read_to_string(report.join("report_summary.csv")).unwrap(), stdout);

    // one driver column fewer
    let narrow = dir.path().join("narrow");
    fs::create_dir(&narrow).unwrap();
    for f in ["edges.csv", "observations.csv", "reservoir_meta.csv", "release.csv", "profiles.csv"] {
        fs::copy(data.join(f), narrow.join(f)).unwrap();
    }
    let drivers = fs::read_to_string(data.join("drivers.csv")).unwrap();
    let trimmed: String = drivers
        .lines()
        .map(|l| {
            let cut = l.rfind(',').unwrap();
            format!("{}\n", &l[..cut])
        })
        .collect();
    fs::write(narrow.join("drivers.csv"), trimmed).unwrap();
    let o = sag(&["eval", "--data", p(&narrow), "--checkpoint", p(&ck), "--out", p(&dir.path().join("r2"))]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));

    // no observation after the training period
    let early = dir.path().join("early");
    fs::create_dir(&early).unwrap();
    for f in ["edges.csv", "drivers.csv", "reservoir_meta.csv", "release.csv", "profiles.csv"] {
        fs::copy(data.join(f), early.join(f)).unwrap();
    }
    let obs = fs::read_to_string(data.join("observations.csv")).unwrap();
    let kept: String = obs
        .lines()
        .filter(|l| !l.contains("2000-02-"))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(early.join("observations.csv"), kept).unwrap();
    let o = sag(&["eval", "--data", p(&early), "--checkpoint", p(&ck), "--out", p(&dir.path().join("r3"))]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_passes_fails_when_corrupted_and_is_deterministic() {
    let a = sag(&["gradcheck", "--size", "tiny"]);
    assert_eq!(code(&a), 0);
    let b = sag(&["gradcheck", "--size", "tiny"]);
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).starts_with("max_relative_error="));

    assert_eq!(code(&sag(&["gradcheck", "--size", "tiny", "--corrupt-backward"])), 1);
    assert_eq!(code(&sag(&["gradcheck", "--size", "huge"])), 2);
}

#[test]
fn experiment_runs_a_small_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    synth(&data);
    let out = dir.path().join("exp");
    let mut args = vec![
        "experiment",
        "--data",
        p(&data),
        "--variants",
        "rnn,sag-sim",
        "--seeds",
        "1,2",
        "--out",
        p(&out),
    ];
    args.extend(QUICK);
    let o = sag(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("report_summary.csv")).unwrap();
    assert!(summary.contains("rnn,all,") && summary.contains("sag-sim,downstream,"));
    assert!(out.join("config.toml").is_file());
}
