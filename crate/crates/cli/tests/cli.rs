use std::path::Path;
use std::process::{Command, Output};

fn adaptnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adaptnet"))
        .args(args)
        .env_remove("ADAPTNET_DATA")
        .output()
        .expect("binary runs")
}

fn run_tiny(out: &Path) -> Output {
    adaptnet(&[
        "run",
        "--dataset",
        "synthetic",
        "--preset",
        "desk",
        "--out",
        out.to_str().unwrap(),
        "--runs",
        "2",
        "--max-epochs",
        "3",
        "--set",
        "source_max_epochs=2",
        "--set",
        "strategies=RESET,REUSE_ALL",
        "--set",
        "prior_tasks=AE",
        "--set",
        "target_tasks=CL",
    ])
}

#[test]
fn run_average_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("exp");
    let o = run_tiny(&out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("5 cells (0 failed)"));
    for f in [
        "config.txt",
        "metrics_raw.csv",
        "metrics.csv",
        "source_metrics.csv",
        "MANIFEST",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let config = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(config.contains("max_epochs = 3"));
    assert!(config.contains("strategies = RESET,REUSE_ALL"));

    let averaged = tmp.path().join("avg.csv");
    let o = adaptnet(&[
        "average",
        out.join("metrics_raw.csv").to_str().unwrap(),
        averaged.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(&averaged).unwrap(),
        std::fs::read(out.join("metrics.csv")).unwrap()
    );

    let ckpt = out.join("checkpoints").join("REUSE_ALL-AE-CL-run0.ckpt");
    let o = adaptnet(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        "synthetic",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(
        text.contains("loss ") && text.contains("accuracy "),
        "{text}"
    );

    let source = out.join("checkpoints").join("source-AE.ckpt");
    let o = adaptnet(&[
        "eval",
        "--checkpoint",
        source.to_str().unwrap(),
        "--dataset",
        "synthetic",
    ]);
    assert!(o.status.success());
    assert!(!String::from_utf8_lossy(&o.stdout).contains("accuracy"));
}

#[test]
fn rerun_of_saved_config_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    assert!(run_tiny(&first).status.success());
    let second = tmp.path().join("second");
    let o = adaptnet(&[
        "run",
        "--config",
        first.join("config.txt").to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(first.join("metrics_raw.csv")).unwrap(),
        std::fs::read(second.join("metrics_raw.csv")).unwrap()
    );
}

#[test]
fn bad_input_fails_cleanly() {
    let o = adaptnet(&["run", "--dataset", "mnist", "--out", "/nonexistent/never"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ADAPTNET_DATA"));

    let o = adaptnet(&["run", "--dataset", "synthetic", "--set", "strategies=NOPE"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown strategy"));

    let o = adaptnet(&["run", "--dataset", "synthetic", "--set", "novalue"]);
    assert_eq!(o.status.code(), Some(1));

    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.csv");
    std::fs::write(
        &empty,
        "dataset,strategy,prior_task,target_task,run_id,epoch,metric,value\n",
    )
    .unwrap();
    let o = adaptnet(&[
        "average",
        empty.to_str().unwrap(),
        tmp.path().join("o.csv").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no records"));
}
