use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn physmae(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_physmae"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn physmae")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = physmae(args, cwd);
    assert!(
        out.status.success(),
        "physmae {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_line(out: &Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err.trim_end().to_string()
}

#[test]
fn gradcheck_on_toy_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--preset", "toy", "--seed", "3"], dir.path());
    assert!(out.starts_with("PASS"), "{out}");
}

#[test]
fn small_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--n", "40", "--seed", "5", "--out", "raw"], d);
    assert_eq!(fs::metadata(d.join("raw/signals.f32")).unwrap().len(), 40 * 3 * 1000 * 4);
    ok(&["preprocess", "--input", "raw", "--out", "pre"], d);
    assert!(fs::read_to_string(d.join("pre/qc.tsv")).unwrap().lines().count() > 1);
    let train = ["pretrain", "--data", "pre", "--epochs", "2", "--batch-size", "8", "--seed", "4"];
    ok(&[&train[..], &["--out", "ck"]].concat(), d);
    ok(&[&train[..], &["--out", "ck2"]].concat(), d);
    for f in ["weights.f32", "checkpoint.json", "loss_history.tsv", "epoch_losses.tsv"] {
        assert_eq!(fs::read(d.join("ck").join(f)).unwrap(), fs::read(d.join("ck2").join(f)).unwrap(), "{f}");
    }

    ok(&["reconstruct", "--checkpoint", "ck", "--data", "pre", "--strategy", "signal(abp)", "--out", "rec"], d);
    let abp = fs::read_to_string(d.join("rec/abp.tsv")).unwrap();
    let mut lines = abp.lines();
    assert_eq!(lines.next().unwrap(), "time\toriginal\treconstructed\tmasked");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 1000);
    assert!(rows.iter().all(|r| r.split('\t').count() == 4 && r.ends_with("\t1")));
    let ecg = fs::read_to_string(d.join("rec/ecg.tsv")).unwrap();
    assert!(ecg.lines().skip(1).all(|r| r.ends_with("\t0")));
}

#[test]
fn probe_writes_a_results_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--n", "30", "--seed", "1", "--out", "raw"], d);
    ok(&["preprocess", "--input", "raw", "--out", "pre"], d);
    ok(&["pretrain", "--data", "pre", "--epochs", "1", "--batch-size", "8", "--out", "ck"], d);
    ok(&["synth", "--downstream", "--n", "400", "--out", "down_raw"], d);
    ok(&["preprocess", "--input", "down_raw", "--stats-from", "pre", "--out", "down"], d);
    let args = [
        "probe", "--checkpoint", "ck", "--data", "down", "--tasks", "hypotension,sbp", "--fraction", "1", "--probe-epochs", "20",
        "--seed", "2",
    ];
    ok(&[&args[..], &["--out", "a.tsv"]].concat(), d);
    ok(&[&args[..], &["--out", "b.tsv"]].concat(), d);
    let a = fs::read_to_string(d.join("a.tsv")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("b.tsv")).unwrap());
    let lines: Vec<&str> = a.lines().collect();
    assert!(lines[0].starts_with("task\tsubset\tfraction\tmetric\tvalue\tdispersion\tn"));
    // three default subsets × two tasks
    assert_eq!(lines.len(), 1 + 6);
    assert!(lines[1].starts_with("hypotension\tecg\t1\tauroc\t"));
}

#[test]
fn errors_are_one_categorised_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = physmae(&["pretrain", "--data", "missing", "--out", "ck"], d);
    assert!(!out.status.success());
    assert!(stderr_line(&out).starts_with("error: io: "));

    let out = physmae(&["pretrain", "--no-such-flag"], d);
    assert!(!out.status.success());
    assert!(stderr_line(&out).starts_with("error: config: "));

    let out = physmae(&["config", "--schedule", "sideways"], d);
    assert!(!out.status.success());
    assert!(stderr_line(&out).starts_with("error: config: "));

    fs::write(d.join("bad.json"), "{ \"train\": { \"epochs\": \"many\" } }").unwrap();
    let out = physmae(&["config", "--config", "bad.json"], d);
    assert!(!out.status.success());
    assert!(stderr_line(&out).starts_with("error: config: "));

    fs::create_dir(d.join("empty")).unwrap();
    fs::write(d.join("empty/manifest.json"), "not json").unwrap();
    let out = physmae(&["preprocess", "--input", "empty", "--out", "x"], d);
    assert!(!out.status.success());
    assert!(stderr_line(&out).starts_with("error: format: "));
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("cfg.json"),
        r#"{ "train": { "epochs": 3, "mask_ratio": 0.3 }, "model": { "model_dim": 48 } }"#,
    )
    .unwrap();
    let cfg: serde_json::Value = serde_json::from_str(&ok(&["config", "--config", "cfg.json", "--epochs", "7"], d)).unwrap();
    assert_eq!(cfg["train"]["epochs"], 7);
    assert_eq!(cfg["train"]["mask_ratio"], 0.3);
    assert_eq!(cfg["train"]["batch_size"], 64);
    assert_eq!(cfg["model"]["model_dim"], 48);
    assert_eq!(cfg["model"]["encoder_depth"], 2);

    let cfg: serde_json::Value =
        serde_json::from_str(&ok(&["config", "--preset", "paper", "--schedule", "inter-intra", "--ablation", "rmse-only"], d)).unwrap();
    assert_eq!(cfg["model"]["encoder_depth"], 12);
    assert_eq!(cfg["schedule"][1], "intra");
    assert_eq!(cfg["train"]["loss"]["beta"], 0.0);

    let cfg: serde_json::Value = serde_json::from_str(&ok(&["config", "--schedule", "inter,sig(ecg+ppg),intra"], d)).unwrap();
    assert_eq!(cfg["train"]["accumulation_steps"], 3);
    assert_eq!(cfg["schedule"][1], "signal(ecg+ppg)");
}

#[test]
fn ablate_writes_one_row_per_arm() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "ablate", "--arms", "all,no-cross-attn", "--pretrain-samples", "30", "--downstream-samples", "300", "--epochs", "1",
            "--batch-size", "8", "--probe-epochs", "10", "--seed", "3", "--out", "ab",
        ],
        d,
    );
    let table = fs::read_to_string(d.join("ab/ablation.tsv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("all\t"));
    assert!(lines[2].starts_with("no-cross-attn\t"));
    assert!(d.join("ab/checkpoints/no-cross-attn/weights.f32").exists());
}
