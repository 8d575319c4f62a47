use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;
use sftn_core::arch::NetArch;

fn sftn(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sftn"))
        .args(args)
        .env("SFTN_OUT_DIR", out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let teacher = NetArch::plain_cnn("cli-t", [3, 16, 16], 10, &[4, 6, 8]).unwrap();
    let student = NetArch::plain_cnn("cli-s", [3, 16, 16], 10, &[2, 3, 4]).unwrap();
    let sgd = json!({"epochs": 1, "milestones": [], "batch_size": 16});
    let cfg = json!({
        "name": "cli",
        "teacher": teacher,
        "student": student,
        "teacher_sgd": sgd,
        "student_sgd": sgd,
        "dataset": {"source": "synth", "size": 60, "seed": 3},
        "seeds": [1, 2],
    });
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path.display().to_string()
}

#[test]
fn train_distill_report_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let cfg = write_config(tmp.path());

    let o = sftn(
        &["train-teacher", "--config", &cfg, "--threads", "1"],
        &runs,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(
        stdout.contains("seed 1: teacher") && stdout.contains("seed 2: teacher"),
        "{stdout}"
    );

    let o = sftn(&["distill", "--config", &cfg, "--seed", "2"], &runs);
    assert!(
        !o.status.success(),
        "seed override changes the run directory"
    );

    let o = sftn(&["distill", "--config", &cfg], &runs);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("student accuracy") && stdout.contains("over 2 seeds"), "{stdout}");
    let report = stdout.lines().find_map(|l| l.strip_prefix("report ")).unwrap();
    let run_dir = Path::new(report.split(' ').next().unwrap()).parent().unwrap().to_path_buf();
    assert!(run_dir.join("distill-kd-standard.csv").exists());
    let cmp = tmp.path().join("cmp");
    let o = sftn(
        &[
            "report",
            run_dir.to_str().unwrap(),
            "--out",
            cmp.to_str().unwrap(),
        ],
        &runs,
    );
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("unpaired"));
    assert!(cmp.join("comparison.csv").exists());

    let ckpt = run_dir.join("teacher-standard-seed1.ckpt");
    let o = sftn(
        &[
            "eval",
            "--config",
            &cfg,
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ],
        &runs,
    );
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["test_accuracy"].as_f64().is_some());
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let cfg = write_config(tmp.path());

    let o = sftn(&["distill", "--config", &cfg], &runs);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing checkpoint"));

    let bad = tmp.path().join("bad.json");
    fs::write(
        &bad,
        r#"{"teacher": "teacher-s3", "student": "student-s3", "seeds": [1]}"#,
    )
    .unwrap();
    let o = sftn(&["train-teacher", "--config", bad.to_str().unwrap()], &runs);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset"));

    let o = sftn(&["sweep", "--config", &cfg], &runs);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no sweep axis"));
}
