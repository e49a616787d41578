use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bagscan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bagscan"))
        .args(args)
        .output()
        .expect("spawn bagscan")
}

fn ok(args: &[&str]) -> String {
    let out = bagscan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_synth(out: &Path, extra: &[&str]) {
    let mut args = vec![
        "gen-synth", "--out", p(out), "--bags", "40", "--dim", "8",
        "--bag-size-min", "3", "--bag-size-max", "8", "--seed", "5",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

const SMALL_MODEL: [&str; 6] = ["--epochs", "2", "--heads", "2", "--landmarks", "4"];

#[test]
fn gen_synth_creates_missing_directory_and_reports_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("nested/data");
    small_synth(&out, &[]);
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 41);
    assert_eq!(fs::read_dir(out.join("bags")).unwrap().count(), 40);
    let resolved = fs::read_to_string(out.join("resolved_config.txt")).unwrap();
    assert!(resolved.contains("num_bags=40\n"));
}

#[test]
fn gen_synth_rejects_zero_witness_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bagscan(&["gen-synth", "--out", p(tmp.path()), "--witness-rate", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("witness_rate"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("synth.cfg");
    fs::write(&cfg, "# small\nnum_bags = 12\nd = 4\nbag-size-min = 2\nbag_size_max = 4\n").unwrap();
    let out = tmp.path().join("d");
    ok(&["gen-synth", "--out", p(&out), "--config", p(&cfg), "--bags", "15"]);
    let resolved = fs::read_to_string(out.join("resolved_config.txt")).unwrap();
    assert!(resolved.contains("num_bags=15\n"));
    assert!(resolved.contains("d=4\n"));
}

#[test]
fn train_writes_defaults_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    small_synth(&data, &[]);
    let manifest = data.join("manifest.csv");
    let runs: Vec<_> = ["a", "b"].iter().map(|n| tmp.path().join(n)).collect();
    for out in &runs {
        let mut args = vec!["train", "--manifest", p(&manifest), "--out", p(out)];
        args.extend_from_slice(&SMALL_MODEL);
        ok(&args);
    }
    let resolved = fs::read_to_string(runs[0].join("resolved_config.txt")).unwrap();
    for line in ["learning_rate=0.0001", "lookahead_k=5", "lookahead_alpha=0.5", "batch_size=1", "model=cmil"] {
        assert!(resolved.lines().any(|l| l == line), "missing {line}");
    }
    for file in ["checkpoint.bin", "history.csv", "split.csv"] {
        assert_eq!(
            fs::read(runs[0].join(file)).unwrap(),
            fs::read(runs[1].join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn evaluate_without_checkpoint_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    small_synth(&data, &[]);
    let out = bagscan(&[
        "evaluate",
        "--checkpoint", p(&tmp.path().join("missing.bin")),
        "--manifest", p(&data.join("manifest.csv")),
        "--out", p(&tmp.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.bin"));
}

#[test]
fn separable_fixture_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    small_synth(&data, &["--witness-rate", "1", "--signal-shift", "6", "--correlation-strength", "0"]);
    let manifest = data.join("manifest.csv");
    let run = tmp.path().join("t");
    ok(&[
        "train", "--manifest", p(&manifest), "--out", p(&run), "--split", "all",
        "--model", "baseline-average", "--epochs", "5", "--learning-rate", "0.05",
    ]);
    let eval = tmp.path().join("e");
    let stdout = ok(&[
        "evaluate", "--checkpoint", p(&run.join("checkpoint.bin")),
        "--manifest", p(&manifest), "--out", p(&eval),
    ]);
    assert!(stdout.contains("accuracy=1.00\n"), "{stdout}");
    assert!(stdout.contains("f1=1.00\n"), "{stdout}");
    let scores = fs::read_to_string(eval.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 41);
}

#[test]
fn temporal_protocol_needs_both_years() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    small_synth(&data, &["--train-year-fraction", "1"]);
    let (manifest, out) = (data.join("manifest.csv"), tmp.path().join("p"));
    let mut args = vec!["protocol-temporal", "--manifest", p(&manifest), "--out", p(&out)];
    args.extend_from_slice(&SMALL_MODEL);
    let out = bagscan(&args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("2020"));
}

#[test]
fn protocols_and_comparison_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    small_synth(&data, &[]);
    let manifest = data.join("manifest.csv");

    let shuffled = tmp.path().join("s");
    let mut args = vec!["protocol-shuffled", "--manifest", p(&manifest), "--out", p(&shuffled), "--repetitions", "2"];
    args.extend_from_slice(&SMALL_MODEL);
    let stdout = ok(&args);
    assert!(stdout.contains("runs=2\n"));
    assert!(shuffled.join("scores_rep02.csv").exists());

    let temporal = tmp.path().join("t");
    let mut args = vec!["protocol-temporal", "--manifest", p(&manifest), "--out", p(&temporal)];
    args.extend_from_slice(&SMALL_MODEL);
    let report = ok(&args);
    assert!(report.contains("train_fraction=0.50\n"), "{report}");

    let cmp = tmp.path().join("c");
    let mut args = vec!["compare-baselines", "--manifest", p(&manifest), "--out", p(&cmp)];
    args.extend_from_slice(&SMALL_MODEL);
    let table = ok(&args);
    assert_eq!(table.lines().count(), 5);
    for kind in ["cmil", "baseline-random", "baseline-addition", "baseline-average"] {
        assert!(cmp.join(format!("scores_{kind}.csv")).exists());
    }
}

#[test]
fn verify_passes_by_default_and_catches_corruption() {
    let stdout = ok(&["verify"]);
    assert!(!stdout.contains("FAIL"), "{stdout}");
    assert!(stdout.contains("attention.exact_end_point"));

    let out = bagscan(&["verify", "--gradcheck", "--corrupt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL gradcheck.corrupted_softmax"));
}
