use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn looc(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_looc"));
    cmd.args(args).env_remove("LOOC_THREADS");
    if let Some(t) = threads {
        cmd.env("LOOC_THREADS", t);
    }
    cmd.output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        "preset=desk\n\
         output_dir={}\n\
         seeds=3\n\
         dataset.classes=4\ndataset.per_class=60\ndataset.spread=0.05\n\
         partition.k=2\npartition.groups=0,2;1,3\n\
         model.hidden=16\ntrain.epochs=3\ntrain.batch_size=20\n\
         ood.count=200\n\
         ablate.epsilons=0,0.002\n{extra}",
        dir.join("out").display()
    );
    let path = dir.join("tiny.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = looc(&["train", "--config", &cfg], Some("2"));
    assert!(out.status.success(), "{}", stderr(&out));
    let run = dir.path().join("out");
    for f in ["config.snapshot", "part0.ckpt", "part1.ckpt", "train_log.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let run_dir = run.to_str().unwrap();
    let out = looc(&["eval", "--run-dir", run_dir, "--set", "uniform"], None);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("auroc="));
    assert!(run.join("scores_uniform.csv").exists());
    assert!(run.join("report_uniform.kv").exists());

    let out = looc(&["report", "--run-dir", run_dir], None);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(run.join("hist_uniform.csv").exists());

    let out = looc(&["eval", "--run-dir", run_dir, "--set", "svhn"], None);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("uniform"), "{}", stderr(&out));
}

#[test]
fn ablate_writes_axis_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = looc(&["--threads", "1", "ablate", "--config", &cfg, "--axis", "epsilon"], None);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("out/ablation_epsilon.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn unknown_axis_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = looc(&["ablate", "--config", &cfg, "--axis", "depth"], None);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("depth"));
}

#[test]
fn too_many_splits_is_reported_with_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "partition.mode=random\npartition.k=9\n");
    let out = looc(&["train", "--config", &cfg], None);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("line 15: key `partition.k`"), "{err}");
    assert!(!dir.path().join("out/part0.ckpt").exists());
}

#[test]
fn missing_config_fails() {
    let out = looc(&["train", "--config", "/nonexistent/looc.cfg"], None);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("/nonexistent/looc.cfg"));
}

#[test]
fn invalid_thread_count_from_env_is_rejected() {
    let out = looc(&["report", "--run-dir", "/nonexistent"], Some("lots"));
    assert!(!out.status.success());
}
