use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "[data]\nbase_images = 24\ntest_images = 6\nshots = 2\n\
                    [train]\npretrain_iters = 20\nfinetune_iters = 8\n";

fn retentive(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retentive"))
        .current_dir(dir)
        .env("RETENTIVE_THREADS", "2")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), config).unwrap();
    dir
}

#[test]
fn eval_runs_the_pipeline_and_reruns_are_skipped() {
    let dir = setup(TINY);
    let args = ["eval", "--config", "tiny.toml", "--seed", "7", "--out", "runs"];
    let o = retentive(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("computed"));
    let report = dir.path().join("runs/seed-7/rpn-max_con-kldiv_cls-cos_dom-all/eval/report.json");
    let first = fs::read(&report).unwrap();

    let o = retentive(dir.path(), &args);
    assert_eq!(code(&o), 0);
    assert!(!stdout(&o).contains("computed"));
    assert_eq!(fs::read(&report).unwrap(), first);

    let o = retentive(dir.path(), &["report", "--out", "runs"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("bAP"));

    let o = retentive(dir.path(), &["detect", "--config", "tiny.toml", "--seed", "7", "--out", "runs", "--output", "dets.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dets: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("dets.json")).unwrap()).unwrap();
    assert_eq!(dets.as_array().unwrap().len(), 6);

    let o = retentive(dir.path(), &["eval", "--config", "tiny.toml", "--seed", "7", "--out", "runs", "--lambda", "0.3"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = setup("[train]\nbogus = 1\n");
    let o = retentive(dir.path(), &["gen-data", "--config", "tiny.toml"]);
    assert_eq!(code(&o), 2);
    let o = retentive(dir.path(), &["gen-data", "--rpn-strategy", "median"]);
    assert_eq!(code(&o), 2);
    let o = retentive(dir.path(), &["finetune", "--rpn-strategy", "max,geo-avg"]);
    assert_eq!(code(&o), 2);
    let o = retentive(dir.path(), &["multirun", "--seeds", "3"]);
    assert_eq!(code(&o), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_retentive"))
        .current_dir(dir.path())
        .env("RETENTIVE_THREADS", "zero")
        .args(["report"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_with_three() {
    let dir = setup(&format!("{TINY}lr = 1.7e308\n"));
    let o = retentive(dir.path(), &["pretrain", "--config", "tiny.toml", "--seed", "1"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn ablate_and_multirun_write_their_outputs() {
    let dir = setup(TINY);
    let o = retentive(
        dir.path(),
        &["ablate", "--config", "tiny.toml", "--seed", "2", "--rpn-strategy", "max,base-only", "--consistency", "kldiv", "--classifier", "cos", "--head-domain", "all,novel-only", "--stage", "gen-data,pretrain,finetune"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let tags: Vec<String> = fs::read_dir(dir.path().join("out/seed-2"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("rpn-"))
        .collect();
    assert_eq!(tags.len(), 4);

    let o = retentive(dir.path(), &["multirun", "--config", "tiny.toml", "--seeds", "4,4", "--out", "multi", "--shots", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("multi/aggregate.csv").exists());
    let agg: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("multi/aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["complete"], true);
    assert_eq!(agg["seeds"], serde_json::json!([4, 4]));
}
