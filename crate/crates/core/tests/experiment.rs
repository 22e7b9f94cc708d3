use std::fs;
use std::path::Path;

use retentive::detector::{ClassifierKind, HeadDomain, RpnStrategy};
use retentive::experiment::*;
use retentive::losses::ConsistencyVariant;
use retentive::Error;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(
        "[data]\nbase_images = 24\ntest_images = 6\nshots = 2\n\
         [train]\npretrain_iters = 20\nfinetune_iters = 8\n",
    )
    .unwrap()
}

fn statuses(o: &SeedOutcome) -> Vec<StageStatus> {
    o.events.iter().map(|e| e.status).collect()
}

#[test]
fn full_pipeline_writes_stamped_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::new(tiny(), vec![7], dir.path());
    let out = run_experiment(&spec).unwrap();
    let o = &out[0];
    assert!(statuses(o).iter().all(|s| *s == StageStatus::Computed));
    assert_eq!(o.events.len(), 5);
    let run = &o.runs[0];
    assert_eq!(run.tag, "rpn-max_con-kldiv_cls-cos_dom-all");
    let report = run.report.as_ref().unwrap();
    assert!(report.summary.ap.is_some() && report.summary.bap.is_some() && report.summary.nap.is_some());
    assert_eq!(report.meta.seed, 7);
    assert_eq!(report.meta.config_digest, spec.config.digest());

    let seed = dir.path().join("seed-7");
    for p in ["data/base/manifest.json", "data/test/images.bin", "pretrain/model.ckpt", "pretrain/train_log.jsonl", "pretrain/eval/report.json"] {
        assert!(seed.join(p).exists(), "{p}");
    }
    let eval = seed.join(&run.tag).join("eval");
    for p in ["report.json", "metrics.csv", "norms.svg", "stage.json"] {
        assert!(eval.join(p).exists(), "{p}");
    }
    let rec: StageRecord = serde_json::from_slice(&fs::read(seed.join(&run.tag).join("finetune/stage.json")).unwrap()).unwrap();
    assert_eq!(rec.seed, 7);
    assert_eq!(rec.stage, StageName::Finetune);
    assert_eq!(rec.products["model"], *run.model_digest.as_ref().unwrap());
    assert_eq!(rec.inputs["base_model"], *o.base_digest.as_ref().unwrap());
    assert!(rec.files.contains_key(CHECKPOINT_FILE));
    let data: StageRecord = serde_json::from_slice(&fs::read(seed.join("data/stage.json")).unwrap()).unwrap();
    assert!(data.files.contains_key("kshot/images.bin"));
}

#[test]
fn rerun_skips_and_changes_are_stale() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::new(tiny(), vec![3], dir.path());
    let first = run_seed(&spec, 3).unwrap();
    let report_path = dir.path().join("seed-3").join(&first.runs[0].tag).join("eval/report.json");
    let bytes = fs::read(&report_path).unwrap();

    let again = run_seed(&spec, 3).unwrap();
    assert!(statuses(&again).iter().all(|s| *s == StageStatus::Skipped));
    assert_eq!(again.base_digest, first.base_digest);
    assert_eq!(again.runs[0].model_digest, first.runs[0].model_digest);
    assert_eq!(again.runs[0].report, first.runs[0].report);
    assert_eq!(fs::read(&report_path).unwrap(), bytes);

    let mut changed = spec.clone();
    changed.config.train.pretrain_iters = 21;
    assert!(matches!(run_seed(&changed, 3), Err(Error::Staleness(_))));

    let mut text = String::from_utf8(bytes).unwrap();
    text.push(' ');
    fs::write(&report_path, text).unwrap();
    assert!(matches!(run_seed(&spec, 3), Err(Error::Staleness(_))));
}

#[test]
fn finetune_only_change_keeps_the_pretrained_model() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::new(tiny(), vec![2], dir.path());
    let first = run_seed(&spec, 2).unwrap();
    let mut other = spec.clone();
    other.config.train.lambda = 0.5;
    other.stages = StageName::Pretrain.through();
    let second = run_seed(&other, 2).unwrap();
    assert_eq!(first.base_digest, second.base_digest);
    assert!(statuses(&second).iter().all(|s| *s == StageStatus::Skipped));
    other.stages = StageName::Eval.through();
    match run_seed(&other, 2) {
        Err(Error::Staleness(m)) => assert!(m.contains("finetune"), "{m}"),
        r => panic!("expected a stale finetune stage, got {r:?}"),
    }
}

#[test]
fn stages_run_separately_and_require_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec::new(tiny(), vec![5], dir.path());
    spec.stages = vec![StageName::Eval];
    assert!(matches!(run_seed(&spec, 5), Err(Error::State(_))));
    for stage in StageName::ALL {
        spec.stages = vec![stage];
        let o = run_seed(&spec, 5).unwrap();
        assert!(o.events.iter().all(|e| e.stage == stage && e.status == StageStatus::Computed));
    }
    spec.stages = StageName::Eval.through();
    let o = run_seed(&spec, 5).unwrap();
    assert!(statuses(&o).iter().all(|s| *s == StageStatus::Skipped));
}

#[test]
fn rpn_ablation_reports_differ_in_the_strategy_setting() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec::new(tiny(), vec![4], dir.path());
    spec.grid = AblationGrid {
        rpn_strategy: vec![RpnStrategy::BaseOnly, RpnStrategy::Max],
        consistency: vec![Some(ConsistencyVariant::Kldiv)],
        classifier: vec![ClassifierKind::Cos],
        head_domain: vec![HeadDomain::All],
    };
    let o = run_seed(&spec, 4).unwrap();
    assert_eq!(o.runs.len(), 2);
    let a = &o.runs[0].report.as_ref().unwrap().meta;
    let b = &o.runs[1].report.as_ref().unwrap().meta;
    assert_eq!((a.seed, &a.dataset_digest, &a.config_digest), (b.seed, &b.dataset_digest, &b.config_digest));
    let diff: Vec<&String> = a.settings.keys().filter(|k| a.settings[*k] != b.settings[*k]).collect();
    assert_eq!(diff, vec!["rpn_strategy"]);
    assert_eq!(a.settings["rpn_strategy"], "base-only");
    assert_eq!(b.settings["rpn_strategy"], "max");
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

#[test]
fn multirun_aggregates_in_seed_order() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::new(tiny(), vec![9, 9], dir.path());
    let agg = multirun(&spec).unwrap();
    assert!(agg.complete);
    assert_eq!(agg.seeds, vec![9, 9]);
    for r in &agg.rows {
        if r.n == 2 {
            assert_eq!(r.std, Some(0.0), "{} {}", r.model, r.metric);
        }
    }
    let tag = "rpn-max_con-kldiv_cls-cos_dom-all";
    let report = read_report(&dir.path().join("seed-9").join(tag).join("eval")).unwrap();
    let row = agg.row(tag, "bap").unwrap();
    assert!((row.mean.unwrap() - report.summary.bap.unwrap()).abs() < 1e-12);
    let json = read_json(&dir.path().join("aggregate.json"));
    assert_eq!(json["complete"], true);
    let csv = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * METRICS.len());

    let one = ExperimentSpec::new(tiny(), vec![9], dir.path());
    assert!(matches!(multirun(&one), Err(Error::Config(_))));
}

#[test]
fn failing_seed_leaves_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec::new(tiny(), vec![1, 2], dir.path());
    spec.stages = vec![StageName::GenData];
    run_seed(&spec, 1).unwrap();
    spec.stages = StageName::Eval.through();
    let bad = dir.path().join("seed-2");
    fs::create_dir_all(bad.join("data")).unwrap();
    fs::write(bad.join("data/stage.json"), "not json").unwrap();
    let agg = multirun(&spec).unwrap();
    assert!(!agg.complete);
    assert_eq!(agg.failures.len(), 1);
    assert_eq!(agg.failures[0].seed, 2);
    assert_eq!(agg.row("base", "bap").unwrap().n, 1);
    assert!(dir.path().join("seed-1/pretrain/eval/report.json").exists());
}
