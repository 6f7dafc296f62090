use std::path::Path;
use std::process::{Command, Output};

use didicm::data::Dataset;

fn didicm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_didicm"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn gen_data_writes_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = didicm(
        dir.path(),
        &[
            "gen-data",
            "--task",
            "ring:5:3:4",
            "--n",
            "300",
            "--corruption",
            "noise:0.5",
            "--seed",
            "9",
            "--out",
            "d.bin",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ds = Dataset::load(&dir.path().join("d.bin")).unwrap();
    assert_eq!(ds.examples.len(), 300);
    assert_eq!(ds.task.num_classes(), 5);
    assert_eq!(ds.task.dim(), 3);
    assert_eq!(ds.corruption.to_string(), "noise:0.5");
    assert!(ds
        .examples
        .iter()
        .all(|e| e.label < 5 && e.features.len() == 3));
}

#[test]
fn exact_eval_reports_csv_on_stdout() {
    let dir = tempfile::tempdir().unwrap();
    assert!(
        didicm(dir.path(), &["gen-data", "--n", "200", "--out", "d.bin"])
            .status
            .success()
    );
    let out = didicm(
        dir.path(),
        &["eval", "--data", "d.bin", "--exact", "--steps", "4"],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), row.len());
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("method"), "cp");
    assert_eq!(col("nfe"), "4");
    assert_eq!(col("n"), "200");
    assert_eq!(col("wall_ms"), "0");
    let top1: f64 = col("top1").parse().unwrap();
    assert!(top1 > 0.7, "{top1}");
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    assert!(
        didicm(dir.path(), &["gen-data", "--n", "100", "--out", "d.bin"])
            .status
            .success()
    );
    std::fs::write(
        dir.path().join("run.cfg"),
        "# sampler\nsteps = 3\nmethod=full\n",
    )
    .unwrap();
    let from_file = stdout(&didicm(
        dir.path(),
        &["eval", "--data", "d.bin", "--exact", "--config", "run.cfg"],
    ));
    assert!(
        from_file.lines().nth(1).unwrap().starts_with("full,3,"),
        "{from_file}"
    );
    let flagged = stdout(&didicm(
        dir.path(),
        &[
            "eval", "--data", "d.bin", "--exact", "--config", "run.cfg", "--steps", "5",
        ],
    ));
    assert!(
        flagged.lines().nth(1).unwrap().starts_with("full,5,"),
        "{flagged}"
    );
}

#[test]
fn exit_codes_distinguish_usage_and_numerical_failures() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        didicm(dir.path(), &["eval", "--data", "missing.bin", "--exact"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        didicm(dir.path(), &["eval", "--steps", "x"]).status.code(),
        Some(2)
    );
    assert_eq!(
        didicm(dir.path(), &["no-such-command"]).status.code(),
        Some(2)
    );

    assert!(
        didicm(dir.path(), &["gen-data", "--n", "50", "--out", "d.bin"])
            .status
            .success()
    );
    let clamp = didicm(
        dir.path(),
        &[
            "eval",
            "--data",
            "d.bin",
            "--exact",
            "--steps",
            "1",
            "--sigma-bar-max",
            "20",
            "--schedule-decay",
            "0.5",
            "--max-clamp",
            "0",
        ],
    );
    assert_eq!(
        clamp.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&clamp.stderr)
    );
}

#[test]
fn train_then_eval_with_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert!(
        didicm(dir.path(), &["gen-data", "--n", "600", "--out", "d.bin"])
            .status
            .success()
    );
    let train = didicm(
        dir.path(),
        &[
            "train",
            "--data",
            "d.bin",
            "--checkpoint",
            "m.ckpt",
            "--epochs",
            "2",
            "--hidden",
            "16",
            "--embed-dim",
            "8",
            "--blocks",
            "1",
            "--groups",
            "4",
            "--eval-size",
            "100",
        ],
    );
    assert!(
        train.status.success(),
        "{}",
        String::from_utf8_lossy(&train.stderr)
    );
    let metrics = stdout(&train);
    assert_eq!(
        metrics.lines().next().unwrap(),
        "epoch,loss,tv,top1,wall_ms"
    );
    assert_eq!(metrics.lines().count(), 3);
    assert!(dir.path().join("m.ckpt").exists());

    let eval = didicm(
        dir.path(),
        &[
            "eval",
            "--data",
            "d.bin",
            "--checkpoint",
            "m.ckpt",
            "--method",
            "cl",
            "--limit",
            "20",
        ],
    );
    assert!(
        eval.status.success(),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let row = stdout(&eval).lines().nth(1).unwrap().to_string();
    assert!(row.starts_with("cl,8,16,"), "{row}");
}

#[test]
fn sample_trace_lists_every_step_and_class() {
    let dir = tempfile::tempdir().unwrap();
    assert!(
        didicm(dir.path(), &["gen-data", "--n", "3", "--out", "d.bin"])
            .status
            .success()
    );
    let out = didicm(
        dir.path(),
        &[
            "sample",
            "--data",
            "d.bin",
            "--exact",
            "--steps",
            "4",
            "--trace",
            "trace.csv",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(stdout(&out).lines().count(), 1 + 3 * 8);
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    // 3 inputs x 5 time points x 8 classes
    assert_eq!(trace.lines().count(), 1 + 3 * 5 * 8);
    assert_eq!(trace.lines().nth(1).unwrap(), "0,0,0,0.125000000000");
}
