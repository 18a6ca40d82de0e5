//! Binary-level checks: exit codes, artifact layout, determinism, resume.

use std::path::{Path, PathBuf};
use std::process::Command;

fn tqd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tqd"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tqd-cli-test-{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

const TINY: &str = "\
scenario.n_frames=6
scenario.n_objects_init=3
scenario.arena=20
tracker.feature_dim=8
tracker.decoder_layers=1
tracker.n_det_queries=6
training.steps=3
training.scenes=2
eval.scenes=2
";

#[test]
fn bad_config_key_exits_2_with_key_path() {
    let dir = tmp_dir("badkey");
    let cfg = dir.join("bad.cfg");
    write(&cfg, "tracker.paradgym=ada\n");
    let out = tqd()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("tracker.paradgym"), "stderr: {stderr}");
}

#[test]
fn missing_config_file_exits_3() {
    let dir = tmp_dir("noio");
    let out = tqd()
        .args(["train", "--config"])
        .arg(dir.join("absent.cfg"))
        .args(["--out"])
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gen_data_writes_scene_files() {
    let dir = tmp_dir("gendata");
    let cfg = dir.join("tiny.cfg");
    write(&cfg, TINY);
    let out = tqd()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("train/scene_0000.txt").exists());
    assert!(dir.join("train/scene_0001.txt").exists());
    assert!(dir.join("eval/scene_0001.txt").exists());
}

#[test]
fn train_then_eval_round_trip_and_determinism() {
    let dir = tmp_dir("trainroundtrip");
    let cfg = dir.join("tiny.cfg");
    write(&cfg, TINY);
    for run in ["a", "b"] {
        let out = tqd()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--out"])
            .arg(dir.join(run))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    // Same config and seed: bitwise-identical artifacts.
    for artifact in ["checkpoint.ckpt", "train_log.csv", "metrics.csv", "results/scene_0000.txt"] {
        let a = std::fs::read(dir.join("a").join(artifact)).unwrap();
        let b = std::fs::read(dir.join("b").join(artifact)).unwrap();
        assert_eq!(a, b, "{artifact} differs between identical runs");
    }

    let out = tqd()
        .args(["eval", "--config"])
        .arg(&cfg)
        .args(["--checkpoint"])
        .arg(dir.join("a/checkpoint.ckpt"))
        .args(["--out"])
        .arg(dir.join("eval-out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    // Evaluation of the saved checkpoint reproduces the training run's
    // result files byte for byte.
    let a = std::fs::read(dir.join("a/results/scene_0000.txt")).unwrap();
    let b = std::fs::read(dir.join("eval-out/results/scene_0000.txt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ablate_runs_grid_and_resumes() {
    let dir = tmp_dir("ablate");
    let grid = dir.join("grid.grid");
    write(
        &grid,
        &format!("{TINY}axis.denoising.mode=off,temporal\n"),
    );
    let run = || {
        tqd()
            .args(["ablate", "--grid"])
            .arg(&grid)
            .args(["--out"])
            .arg(dir.join("out"))
            .args(["--threads", "2"])
            .output()
            .unwrap()
    };
    let out = run();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("out/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus one row per cell: {csv}");

    // Second invocation resumes every cell from its hash directory.
    let out = run();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0 cells run, 2 resumed"), "stdout: {stdout}");
    let csv2 = std::fs::read_to_string(dir.join("out/ablation.csv")).unwrap();
    assert_eq!(csv, csv2);
}

#[test]
fn empty_grid_exits_2() {
    let dir = tmp_dir("emptygrid");
    let grid = dir.join("empty.grid");
    write(&grid, "# nothing here\n");
    let out = tqd()
        .args(["ablate", "--grid"])
        .arg(&grid)
        .args(["--out"])
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_from_metrics_csv() {
    let dir = tmp_dir("report");
    let csv = dir.join("m.csv");
    write(
        &csv,
        "run_id,paradigm,denoising_mode,seed,AMOTA,AMOTP,MOTA,Recall,IDS,FP,FN,TP\n\
         cellA,ada,temporal,1,0.5,1.0,0.4,0.6,10,5,3,20\n\
         cellA,ada,temporal,2,0.7,1.0,0.4,0.6,10,5,3,20\n",
    );
    let out = tqd()
        .args(["report", "--out"])
        .arg(&dir)
        .arg(&csv)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let md = std::fs::read_to_string(dir.join("report.md")).unwrap();
    assert!(md.contains("cellA"));
    assert!(dir.join("report.svg").exists());

    // Schema mismatch is a config-class failure.
    let bad = dir.join("bad.csv");
    write(&bad, "nope\n1\n");
    let out = tqd()
        .args(["report", "--out"])
        .arg(&dir)
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn env_var_default_out_dir() {
    let dir = tmp_dir("envout");
    let cfg = dir.join("tiny.cfg");
    write(&cfg, TINY);
    let out = tqd()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .env("TQD_OUT_DIR", dir.join("from-env"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("from-env/train/scene_0000.txt").exists());
}
