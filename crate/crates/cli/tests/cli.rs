use std::path::Path;
use std::process::{Command, Output};

use hunet::data::{detect_layout, load_dataset, LoadOptions};

fn hunet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hunet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Trains a tiny model and returns the run directory.
fn tiny_run(dir: &Path) -> std::path::PathBuf {
    let o = hunet(
        &["train", "--data", "synth://20x32", "--epochs", "2", "--batch-size", "4", "--base-channels", "8", "--out", "run"],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("run")
}

#[test]
fn train_writes_history_checkpoints_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let o = hunet(
        &["train", "--data", "synth://200x64", "--epochs", "5", "--base-channels", "8", "--out", "run"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = dir.path().join("run");
    let csv = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
    for f in ["config.toml", "history.json", "ckpt_epoch5.bin", "ckpt_best.bin", "metrics.json", "metrics.txt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let snapshot = hunet::RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(snapshot.train.epochs, 5);
    assert_eq!(snapshot.data.source, "synth://200x64");
}

#[test]
fn unbalanced_alpha_beta_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hunet(&["train", "--alpha", "0.7", "--beta", "0.4", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("alpha + beta must equal 1"), "{}", stderr(&o));
}

#[test]
fn default_snapshot_records_100_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let o = hunet(&["train", "--dry-run", "--out", "run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let snapshot = hunet::RunConfig::load(&dir.path().join("run/config.toml")).unwrap();
    assert_eq!(snapshot.train.epochs, 100);
    assert_eq!(snapshot.train.batch_size, 32);
    assert_eq!(snapshot, {
        let mut c = hunet::RunConfig::default();
        c.output.dir = "run".into();
        c.resolve().unwrap();
        c
    });
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[train]\nepochs = 9\nbatch_size = 3\n[loss]\nalpha = 0.3\nbeta = 0.7\n").unwrap();
    let o = hunet(&["train", "--config", "c.toml", "--epochs", "4", "--dry-run", "--out", "run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let c = hunet::RunConfig::load(&dir.path().join("run/config.toml")).unwrap();
    assert_eq!((c.train.epochs, c.train.batch_size, c.loss.alpha), (4, 3, 0.3));

    std::fs::write(dir.path().join("bad.toml"), "[train]\nepoks = 9\n").unwrap();
    assert_eq!(hunet(&["train", "--config", "bad.toml", "--dry-run"], dir.path()).status.code(), Some(1));
}

#[test]
fn divergence_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = hunet(
        &["train", "--data", "synth://12x32", "--epochs", "2", "--batch-size", "4", "--base-channels", "8", "--lr", "1e30", "--out", "run"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("batch"));
}

#[test]
fn eval_reports_table_and_validates_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path());
    let ckpt = run.join("ckpt_best.bin");
    let ckpt = ckpt.to_str().unwrap();

    let o = hunet(&["eval", "--checkpoint", ckpt, "--data", "synth://20x32", "--out", "ev"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let header: Vec<String> = stdout(&o).lines().next().unwrap().split('|').map(|c| c.trim().to_string()).collect();
    assert_eq!(header, ["Model", "Dice", "Sensitivity", "Specificity"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert!(report["aggregate"]["dice"].is_number());
    assert!(report["macro_average"]["dice"].is_number());

    let o = hunet(&["eval", "--checkpoint", ckpt, "--data", "synth://20x32", "--threshold", "1.5"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = hunet(&["eval", "--checkpoint", "missing.bin", "--data", "synth://20x32"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = hunet(&["eval", "--checkpoint", ckpt, "--data", "synth://20x32", "--base-channels", "16"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn predict_writes_two_binary_files_per_input() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path());
    assert!(hunet(&["synth", "--count", "4", "--size", "32", "--out", "syn"], dir.path()).status.success());
    let ckpt = run.join("ckpt_best.bin");
    let ckpt = ckpt.to_str().unwrap();

    let predict = |out: &str| {
        let o = hunet(&["predict", "--checkpoint", ckpt, "--images", "syn/images", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    };
    predict("p1");
    predict("p2");
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("p1"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 8);
    assert_eq!(names[0], "synth0000_mask.png");
    assert_eq!(names[1], "synth0000_prob.png");
    for name in &names {
        let a = std::fs::read(dir.path().join("p1").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("p2").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between runs");
    }
    // Reload masks through the dataset loader: labels decode to {0, 1} only
    // if the PNG holds just 0 and 255 under a 128 threshold.
    for name in names.iter().filter(|n| n.ends_with("_mask.png")) {
        let slice = hunet::data::read_png_slice(&dir.path().join("p1").join(name)).unwrap();
        assert!(slice.pixels.iter().all(|&v| v == 0.0 || v == 255.0));
    }

    std::fs::write(dir.path().join("broken.png"), b"not an image").unwrap();
    let o = hunet(&["predict", "--checkpoint", ckpt, "--images", "broken.png", "--out", "p3"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("broken.png"));
}

#[test]
fn check_passes_and_catches_a_planted_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = hunet(&["check", "all", "--json", "checks.json"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("checks.json")).unwrap()).unwrap();
    assert!(parsed.as_array().unwrap().len() > 10);

    let o = hunet(&["check", "losses", "--inject-fault", "flip-boundary-gradient"], dir.path());
    assert_ne!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().any(|l| l.starts_with("FAIL gradient: boundary")), "{}", stdout(&o));

    let o = hunet(&["check", "gates"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("100 random draws"));
}

#[test]
fn synth_writes_a_loadable_reproducible_dataset() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = hunet(&["synth", "--count", "50", "--size", "64", "--seed", "3", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = dir.path().join("a");
    assert_eq!(std::fs::read_dir(a.join("images")).unwrap().count(), 50);
    assert_eq!(std::fs::read_dir(a.join("masks")).unwrap().count(), 50);
    for entry in std::fs::read_dir(a.join("images")).unwrap() {
        let name = entry.unwrap().file_name();
        for sub in ["images", "masks"] {
            let x = std::fs::read(a.join(sub).join(&name)).unwrap();
            let y = std::fs::read(dir.path().join("b").join(sub).join(&name)).unwrap();
            assert_eq!(x, y);
        }
    }
    let layout = detect_layout(&a).unwrap();
    assert_eq!(load_dataset(&a, layout, LoadOptions::default()).unwrap().len(), 50);

    let o = hunet(&["train", "--data", a.to_str().unwrap(), "--epochs", "1", "--base-channels", "8", "--out", "run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));

    std::fs::write(dir.path().join("file"), b"x").unwrap();
    let o = hunet(&["synth", "--count", "2", "--size", "32", "--out", "file/sub"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_emits_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = hunet(
        &["ablate", "--data", "synth://20x32", "--epochs", "1", "--batch-size", "4", "--base-channels", "8", "--out", "ab"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let names: Vec<&str> = table.lines().skip(2).map(|l| l.split('|').next().unwrap().trim()).collect();
    assert_eq!(names, ["BCE", "Dice+Boundary", "BCE+Dice", "Bi-H"]);
    assert_eq!(table.lines().next().unwrap().split('|').count(), 4);
    assert!(dir.path().join("ab/ablation.json").is_file());
}

#[test]
fn usage_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hunet(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(hunet(&["train", "--epochs", "many"], dir.path()).status.code(), Some(1));
    assert_eq!(hunet(&["--help"], dir.path()).status.code(), Some(0));
}
