//! End-to-end runs of the `deepgp` binary: training round trips, checkpoint
//! determinism across worker counts and process boundaries, error reporting
//! and the sampling/imputation/BO commands.

use deepgp_testkit::datasets;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deepgp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn deepgp")
}

fn write_config(dir: &Path, max_iters: usize) -> PathBuf {
    let path = dir.join("config.json");
    let cfg = format!(
        r#"{{
  "model": {{
    "mode": "unsupervised",
    "latent_dims": [2],
    "inducing": [8],
    "kernels": ["exp_quad"],
    "recognition": {{ "hidden_widths": [8] }}
  }},
  "train": {{ "max_iters": {max_iters}, "seed": 3, "shard_count": 8 }}
}}"#
    );
    std::fs::write(&path, cfg).unwrap();
    path
}

fn write_data(dir: &Path) -> PathBuf {
    let y = datasets::three_clusters(60, 4, 17);
    let path = dir.join("data.csv");
    deepgp::io::write_csv(&path, &y.view()).unwrap();
    path
}

#[test]
fn train_then_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 15);
    let data = write_data(dir.path());
    let ckpt = dir.path().join("model.ckpt");
    let log = dir.path().join("train.tsv");

    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
    ]);
    let code = out.status.code().unwrap();
    assert!(code == 0 || code == 2, "train failed: {out:?}");
    assert!(ckpt.exists());
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert!(log_text.starts_with("iteration\tbound\tgrad_inf_norm\twall_secs"));
    assert!(log_text.lines().count() >= 2);

    let out = run(&[
        "eval",
        "--model",
        ckpt.to_str().unwrap(),
        "--train-data",
        data.to_str().unwrap(),
        "--test-data",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "eval failed: {out:?}");
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(
        text.lines().any(|l| l.starts_with("test_log_likelihood=")),
        "missing metric line: {text}"
    );
}

#[test]
fn worker_count_does_not_change_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 10);
    let data = write_data(dir.path());
    let mut checkpoints = Vec::new();
    for workers in ["1", "4"] {
        let ckpt = dir.path().join(format!("model_{workers}.ckpt"));
        let out = run(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--workers",
            workers,
            "--deterministic",
        ]);
        let code = out.status.code().unwrap();
        assert!(code == 0 || code == 2, "train failed: {out:?}");
        checkpoints.push(std::fs::read(&ckpt).unwrap());
    }
    assert_eq!(
        checkpoints[0], checkpoints[1],
        "worker count changed the checkpoint bytes"
    );
}

#[test]
fn multiprocess_training_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 8);
    let data = write_data(dir.path());
    let mut checkpoints = Vec::new();
    for extra in [&[][..], &["--multiprocess", "--workers", "3"][..]] {
        let ckpt = dir
            .path()
            .join(format!("model_{}.ckpt", extra.len()));
        let mut args = vec![
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--deterministic",
        ];
        args.extend_from_slice(extra);
        let out = run(&args);
        let code = out.status.code().unwrap();
        assert!(code == 0 || code == 2, "train failed: {out:?}");
        checkpoints.push(std::fs::read(&ckpt).unwrap());
    }
    assert_eq!(
        checkpoints[0], checkpoints[1],
        "process backend changed the checkpoint bytes"
    );
}

#[test]
fn missing_config_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(
        &path,
        r#"{ "model": { "mode": "unsupervised", "latent_dims": [2], "kernels": ["exp_quad"] } }"#,
    )
    .unwrap();
    let data = write_data(dir.path());
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("m.ckpt").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("inducing"), "field not named: {err}");
}

#[test]
fn absent_files_exit_above_two() {
    let out = run(&[
        "eval",
        "--model",
        "/nonexistent/m.ckpt",
        "--train-data",
        "/nonexistent/a.csv",
        "--test-data",
        "/nonexistent/b.csv",
    ]);
    assert!(out.status.code().unwrap() > 2);
}

#[test]
fn sampling_is_reproducible_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 10);
    let data = write_data(dir.path());
    let ckpt = dir.path().join("model.ckpt");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.code().unwrap() <= 2);

    let mut hashes = Vec::new();
    for name in ["s1.csv", "s2.csv"] {
        let sp = dir.path().join(name);
        let out = run(&[
            "sample",
            "--model",
            ckpt.to_str().unwrap(),
            "--n",
            "10",
            "--seed",
            "42",
            "--out",
            sp.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{out:?}");
        hashes.push(std::fs::read(&sp).unwrap());
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn impute_completes_missing_cells_with_variances() {
    let dir = tempfile::tempdir().unwrap();
    // line data so the completion is determined by the observed coordinate
    let y = datasets::line_data(100, 0.8, 0.3, 0.05, 7);
    let data = dir.path().join("data.csv");
    deepgp::io::write_csv(&data, &y.view()).unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{
  "model": { "mode": "unsupervised", "latent_dims": [1], "inducing": [8],
             "kernels": ["exp_quad"], "recognition": { "hidden_widths": [6] } },
  "train": { "max_iters": 60, "seed": 5 }
}"#,
    )
    .unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.code().unwrap() <= 2, "{out:?}");

    let partial = dir.path().join("partial.csv");
    std::fs::write(&partial, "c0,c1\n0.9,\n-0.5,nan\n").unwrap();
    let completed_path = dir.path().join("completed.csv");
    let out = run(&[
        "impute",
        "--model",
        ckpt.to_str().unwrap(),
        "--data",
        partial.to_str().unwrap(),
        "--out",
        completed_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let completed: ndarray::Array2<f64> = deepgp::io::read_csv(&completed_path).unwrap();
    assert_eq!(completed.ncols(), 4); // values + variances
    for i in 0..2 {
        assert!(completed[(i, 1)].is_finite());
        assert!(completed[(i, 3)] > 0.0, "variance column missing");
    }
    // the completion tracks the line y2 = 0.8 y1 + 0.3
    let expect0 = 0.8 * 0.9 + 0.3;
    let sd0 = completed[(0, 3)].sqrt();
    assert!(
        (completed[(0, 1)] - expect0).abs() < 3.0 * sd0.max(0.05),
        "imputed {} vs line value {expect0}",
        completed[(0, 1)]
    );
}

#[test]
fn bo_writes_trace_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("traces");
    let out = run(&[
        "bo",
        "--objective",
        "branin",
        "--surrogate",
        "gp",
        "--replicates",
        "2",
        "--iters",
        "3",
        "--init",
        "3",
        "--seed",
        "1",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    for rep in 0..2 {
        let p = out_dir.join(format!("trace_gp_{rep:02}.csv"));
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,x0,x1,value,best,kind"
        );
        assert_eq!(lines.count(), 6);
    }
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("median_best="));
}

#[test]
fn version_prints_format_tags() {
    let out = run(&["version"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("checkpoint_format_version=1"));
    assert!(text.contains("matrix_format_version=1"));
}
