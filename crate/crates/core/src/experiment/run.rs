use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{json_digest, Ablation, AblationGrid, ExperimentConfig};
use crate::detector::{load_checkpoint, save_checkpoint, ImageFeatures, Model};
use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate_with, report_json, EvalReport, RunMeta};
use crate::synthgen::{
    build_base_dataset, build_kshot_dataset, build_test_dataset, load_dataset, save_dataset, split_classes, Dataset,
};
use crate::trainer::{dataset_features, finetune, pretrain, TrainOutcome};

pub const STAGE_RECORD: &str = "stage.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageName {
    GenData,
    Pretrain,
    Finetune,
    Eval,
}

crate::detector::closed_set!(
    StageName, "stage",
    "gen-data" => StageName::GenData,
    "pretrain" => StageName::Pretrain,
    "finetune" => StageName::Finetune,
    "eval" => StageName::Eval,
);

impl StageName {
    pub const ALL: [StageName; 4] = [Self::GenData, Self::Pretrain, Self::Finetune, Self::Eval];

    /// This stage and every stage before it.
    pub fn through(self) -> Vec<StageName> {
        Self::ALL.into_iter().filter(|s| *s <= self).collect()
    }
}

/// What to run: stages, ablation points and seeds, written under `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub config: ExperimentConfig,
    pub stages: Vec<StageName>,
    pub grid: AblationGrid,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl ExperimentSpec {
    /// All stages for the configuration's own ablation setting.
    pub fn new(config: ExperimentConfig, seeds: Vec<u64>, out: impl Into<PathBuf>) -> Self {
        let grid = AblationGrid::single(Ablation::of(&config));
        Self {
            config,
            stages: StageName::ALL.to_vec(),
            grid,
            seeds,
            out: out.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if self.grid.is_empty() {
            return Err(Error::Config("every ablation axis needs at least one value".into()));
        }
        Ok(())
    }

    fn wants(&self, s: StageName) -> bool {
        self.stages.contains(&s)
    }
}

/// Provenance written next to every stage's artifacts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: StageName,
    pub seed: u64,
    pub config_digest: String,
    /// Digests of the upstream artifacts the stage consumed.
    pub inputs: BTreeMap<String, String>,
    /// Digests of the stage's own products.
    pub products: BTreeMap<String, String>,
    /// SHA-256 of every file written, keyed by file name.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Computed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageEvent {
    pub dir: PathBuf,
    pub stage: StageName,
    pub status: StageStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    pub ablation: Ablation,
    pub tag: String,
    pub model_digest: Option<String>,
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub base_digest: Option<String>,
    pub base_report: Option<EvalReport>,
    pub runs: Vec<AblationOutcome>,
    pub events: Vec<StageEvent>,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Files of a stage, relative to its directory. Subdirectories holding
/// their own stage record belong to another stage.
fn files_under(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, rel: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(root.join(rel))? {
            let entry = entry?;
            let path = rel.join(entry.file_name());
            if entry.file_type()?.is_dir() {
                if !root.join(&path).join(STAGE_RECORD).exists() {
                    walk(root, &path, out)?;
                }
            } else if path.as_os_str() != STAGE_RECORD {
                out.push(path.to_string_lossy().replace('\\', "/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, Path::new(""), &mut out)?;
    out.sort();
    Ok(out)
}

fn stale(dir: &Path, what: impl std::fmt::Display) -> Error {
    Error::Staleness(format!("{}: {what}", dir.display()))
}

/// Compares a stage directory against the record it should carry.
///
/// `Ok(Some(rec))` means every recorded file is present and unchanged and the
/// configuration and inputs match; `Ok(None)` means the stage never ran.
fn current_record(dir: &Path, stage: StageName, seed: u64, config_digest: &str, inputs: &BTreeMap<String, String>) -> Result<Option<StageRecord>> {
    let path = dir.join(STAGE_RECORD);
    if !path.exists() {
        return Ok(None);
    }
    let rec: StageRecord = serde_json::from_slice(&fs::read(&path)?).map_err(|e| stale(dir, format!("unreadable stage record: {e}")))?;
    if rec.stage != stage || rec.seed != seed {
        return Err(stale(dir, "stage record belongs to another stage or seed"));
    }
    if rec.config_digest != config_digest {
        return Err(stale(dir, "produced under a different configuration"));
    }
    if &rec.inputs != inputs {
        return Err(stale(dir, "upstream artifacts changed since this stage ran"));
    }
    for (name, digest) in &rec.files {
        let p = dir.join(name);
        if !p.exists() || &file_digest(&p)? != digest {
            return Err(stale(dir, format!("{name} was modified or removed")));
        }
    }
    Ok(Some(rec))
}

fn write_record(dir: &Path, stage: StageName, seed: u64, config_digest: &str, inputs: BTreeMap<String, String>, products: BTreeMap<String, String>) -> Result<StageRecord> {
    let mut files = BTreeMap::new();
    for name in files_under(dir)? {
        files.insert(name.clone(), file_digest(&dir.join(&name))?);
    }
    let rec = StageRecord {
        stage,
        seed,
        config_digest: config_digest.to_string(),
        inputs,
        products,
        files,
    };
    fs::write(dir.join(STAGE_RECORD), serde_json::to_vec_pretty(&rec)?)?;
    Ok(rec)
}

/// Record of an upstream stage that must already be current.
fn require(dir: &Path, stage: StageName, seed: u64, config_digest: &str, inputs: &BTreeMap<String, String>) -> Result<StageRecord> {
    current_record(dir, stage, seed, config_digest, inputs)?
        .ok_or_else(|| Error::State(format!("{} has not been run for {}", stage, dir.display())))
}

struct Datasets {
    base: Dataset,
    kshot: Dataset,
    test: Dataset,
}

const DATA_PARTS: [&str; 3] = ["base", "kshot", "test"];

fn products(rec: &StageRecord, key: &str) -> Result<String> {
    rec.products
        .get(key)
        .cloned()
        .ok_or_else(|| Error::Staleness(format!("stage record of {} lacks `{key}`", rec.stage)))
}

fn inputs(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Runner for one seed; keeps loaded artifacts between stages.
struct SeedRun<'a> {
    spec: &'a ExperimentSpec,
    seed: u64,
    dir: PathBuf,
    events: Vec<StageEvent>,
}

impl SeedRun<'_> {
    fn note(&mut self, dir: &Path, stage: StageName, status: StageStatus) {
        self.events.push(StageEvent {
            dir: dir.to_path_buf(),
            stage,
            status,
        });
    }

    fn data_digest(&self) -> String {
        json_digest(&(self.seed, &self.spec.config.data))
    }

    fn gen_data(&mut self) -> Result<(StageRecord, Option<Datasets>)> {
        let dir = self.dir.join("data");
        let cd = self.data_digest();
        let none = BTreeMap::new();
        if !self.spec.wants(StageName::GenData) {
            return Ok((require(&dir, StageName::GenData, self.seed, &cd, &none)?, None));
        }
        if let Some(rec) = current_record(&dir, StageName::GenData, self.seed, &cd, &none)? {
            self.note(&dir, StageName::GenData, StageStatus::Skipped);
            return Ok((rec, None));
        }
        let cfg = &self.spec.config.data;
        let split = split_classes(cfg.num_classes, cfg.num_novel, self.seed)?;
        let sets = Datasets {
            base: build_base_dataset(&split, cfg, self.seed)?,
            kshot: build_kshot_dataset(&split, cfg.shots, cfg, self.seed)?,
            test: build_test_dataset(&split, cfg, self.seed)?,
        };
        fs::create_dir_all(&dir)?;
        let mut prods = BTreeMap::new();
        for (name, ds) in DATA_PARTS.iter().zip([&sets.base, &sets.kshot, &sets.test]) {
            let d = save_dataset(ds, &dir.join(name))?;
            prods.insert(format!("{name}_dataset"), d);
        }
        let rec = write_record(&dir, StageName::GenData, self.seed, &cd, none, prods)?;
        self.note(&dir, StageName::GenData, StageStatus::Computed);
        Ok((rec, Some(sets)))
    }

    fn load_set(&self, data: &StageRecord, name: &str) -> Result<Dataset> {
        let ds = load_dataset(&self.dir.join("data").join(name))?;
        if ds.digest() != products(data, &format!("{name}_dataset"))? {
            return Err(stale(&self.dir.join("data"), format!("{name} dataset does not match its record")));
        }
        Ok(ds)
    }

    fn pretrain_stage(&mut self, data: &StageRecord, sets: &mut Option<Datasets>) -> Result<(StageRecord, Option<Model>)> {
        let dir = self.dir.join("pretrain");
        let mut cfg = self.spec.config.pretrain_view();
        cfg.train.seed = self.seed;
        let cd = cfg.digest();
        let base_ds = products(data, "base_dataset")?;
        let ins = inputs(&[("base_dataset", &base_ds)]);
        if !self.spec.wants(StageName::Pretrain) {
            return Ok((require(&dir, StageName::Pretrain, self.seed, &cd, &ins)?, None));
        }
        if let Some(rec) = current_record(&dir, StageName::Pretrain, self.seed, &cd, &ins)? {
            self.note(&dir, StageName::Pretrain, StageStatus::Skipped);
            return Ok((rec, None));
        }
        let ds = match sets {
            Some(s) => s.base.clone(),
            None => self.load_set(data, "base")?,
        };
        let TrainOutcome { model, log } = pretrain(&ds, &cfg.arch, &cfg.train)?;
        fs::create_dir_all(&dir)?;
        let digest = save_checkpoint(&model, &dir.join(CHECKPOINT_FILE))?;
        log.write_jsonl(&dir.join(TRAIN_LOG_FILE))?;
        let prods = inputs(&[("model", &digest), ("base_subset", &model.base_digest())]);
        let rec = write_record(&dir, StageName::Pretrain, self.seed, &cd, ins, prods)?;
        self.note(&dir, StageName::Pretrain, StageStatus::Computed);
        Ok((rec, Some(model)))
    }

    fn load_model(&self, dir: &Path, rec: &StageRecord) -> Result<Model> {
        let model = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
        if crate::detector::checkpoint_digest(&model)? != products(rec, "model")? {
            return Err(stale(dir, "checkpoint does not match its record"));
        }
        Ok(model)
    }

    fn finetune_stage(&mut self, a: &Ablation, data: &StageRecord, pre: &StageRecord, base: &Model, kshot: &Dataset) -> Result<(StageRecord, Option<Model>)> {
        let dir = self.dir.join(a.tag()).join("finetune");
        let mut cfg = a.apply(&self.spec.config);
        cfg.train.seed = self.seed;
        let cd = cfg.digest();
        let ins = inputs(&[("kshot_dataset", &products(data, "kshot_dataset")?), ("base_model", &products(pre, "model")?)]);
        if !self.spec.wants(StageName::Finetune) {
            return Ok((require(&dir, StageName::Finetune, self.seed, &cd, &ins)?, None));
        }
        if let Some(rec) = current_record(&dir, StageName::Finetune, self.seed, &cd, &ins)? {
            return Ok((rec, None));
        }
        let TrainOutcome { model, log } = finetune(base, kshot, &cfg.train)?;
        fs::create_dir_all(&dir)?;
        let digest = save_checkpoint(&model, &dir.join(CHECKPOINT_FILE))?;
        log.write_jsonl(&dir.join(TRAIN_LOG_FILE))?;
        let prods = inputs(&[("model", &digest), ("base_subset", &model.base_digest())]);
        let rec = write_record(&dir, StageName::Finetune, self.seed, &cd, ins, prods)?;
        Ok((rec, Some(model)))
    }

    /// Evaluates `model` into `dir`, or reloads a current report.
    #[allow(clippy::too_many_arguments)]
    fn eval_stage(&self, dir: &Path, cfg: &ExperimentConfig, settings: BTreeMap<String, String>, model_digest: &str, model: Option<&Model>, test: &Dataset, feats: &[ImageFeatures]) -> Result<(EvalReport, StageStatus)> {
        let cd = cfg.digest();
        let test_digest = test.digest();
        let ins = inputs(&[("model", model_digest), ("test_dataset", &test_digest)]);
        if !self.spec.wants(StageName::Eval) {
            require(dir, StageName::Eval, self.seed, &cd, &ins)?;
            return Ok((read_report(dir)?, StageStatus::Skipped));
        }
        if current_record(dir, StageName::Eval, self.seed, &cd, &ins)?.is_some() {
            return Ok((read_report(dir)?, StageStatus::Skipped));
        }
        let model = model.ok_or_else(|| Error::State("model is not loaded".into()))?;
        let meta = RunMeta {
            seed: self.seed,
            model_digest: model_digest.to_string(),
            dataset_digest: test_digest,
            config_digest: self.spec.config.digest(),
            settings,
        };
        let report = evaluate_with(model, test, feats, &cfg.detect, meta)?;
        emit_report(&report, dir)?;
        let prods = inputs(&[("report", &hex::encode(Sha256::digest(report_json(&report)?)))]);
        write_record(dir, StageName::Eval, self.seed, &cd, ins, prods)?;
        Ok((report, StageStatus::Computed))
    }

    fn run(mut self) -> Result<SeedOutcome> {
        let spec = self.spec;
        let (data, mut sets) = self.gen_data()?;
        let needs_models = spec.stages.iter().any(|s| *s >= StageName::Pretrain);
        let mut outcome = SeedOutcome {
            seed: self.seed,
            dir: self.dir.clone(),
            base_digest: None,
            base_report: None,
            runs: Vec::new(),
            events: Vec::new(),
        };
        if !needs_models {
            outcome.events = self.events;
            return Ok(outcome);
        }
        let (pre, fresh) = self.pretrain_stage(&data, &mut sets)?;
        let base_digest = products(&pre, "model")?;
        outcome.base_digest = Some(base_digest.clone());
        let downstream = spec.wants(StageName::Finetune) || spec.wants(StageName::Eval);
        if !downstream {
            outcome.events = self.events;
            return Ok(outcome);
        }
        let base = match fresh {
            Some(m) => m,
            None => self.load_model(&self.dir.join("pretrain"), &pre)?,
        };
        let (kshot, test) = match sets.take() {
            Some(s) => (s.kshot, s.test),
            None => (self.load_set(&data, "kshot")?, self.load_set(&data, "test")?),
        };
        let feats = if spec.wants(StageName::Eval) {
            dataset_features(&base, &test)?
        } else {
            Vec::new()
        };

        if spec.wants(StageName::Eval) {
            let base_dir = self.dir.join("pretrain").join("eval");
            let mut base_cfg = spec.config.pretrain_view();
            base_cfg.detect = spec.config.detect.clone();
            let base_settings = BTreeMap::from([("model".to_string(), "base".to_string())]);
            let (report, status) = self.eval_stage(&base_dir, &base_cfg, base_settings, &base_digest, Some(&base), &test, &feats)?;
            self.note(&base_dir, StageName::Eval, status);
            outcome.base_report = Some(report);
        }

        let points: Vec<Ablation> = spec.grid.iter().collect();
        let this = &self;
        let results: Vec<Result<(AblationOutcome, Vec<StageEvent>)>> = points
            .par_iter()
            .map(|a| {
                let mut local = SeedRun {
                    spec,
                    seed: this.seed,
                    dir: this.dir.clone(),
                    events: Vec::new(),
                };
                let tag = a.tag();
                let ft_dir = local.dir.join(&tag).join("finetune");
                let (rec, model) = local.finetune_stage(a, &data, &pre, &base, &kshot)?;
                if spec.wants(StageName::Finetune) {
                    let status = if model.is_some() { StageStatus::Computed } else { StageStatus::Skipped };
                    local.note(&ft_dir, StageName::Finetune, status);
                }
                let digest = products(&rec, "model")?;
                let mut report = None;
                if spec.wants(StageName::Eval) {
                    let eval_dir = local.dir.join(&tag).join("eval");
                    let cfg = a.apply(&spec.config);
                    let loaded;
                    let model_ref = match &model {
                        Some(m) => Some(m),
                        None if current_record(&eval_dir, StageName::Eval, local.seed, &cfg.digest(), &inputs(&[("model", &digest), ("test_dataset", &test.digest())]))?.is_some() => None,
                        None => {
                            loaded = local.load_model(&ft_dir, &rec)?;
                            Some(&loaded)
                        }
                    };
                    let (r, status) = local.eval_stage(&eval_dir, &cfg, a.settings(), &digest, model_ref, &test, &feats)?;
                    local.note(&eval_dir, StageName::Eval, status);
                    report = Some(r);
                }
                Ok((
                    AblationOutcome {
                        ablation: *a,
                        tag,
                        model_digest: Some(digest),
                        report,
                    },
                    local.events,
                ))
            })
            .collect();
        for r in results {
            let (run, events) = r?;
            self.events.extend(events);
            outcome.runs.push(run);
        }
        outcome.events = self.events;
        Ok(outcome)
    }
}

pub fn read_report(dir: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_slice(&fs::read(dir.join("report.json"))?)?)
}

/// Runs the requested stages for one seed.
///
/// Stages whose record matches the current configuration and inputs are
/// skipped; a record that disagrees is a staleness error. Stages not
/// requested must already be current when a requested stage needs them.
pub fn run_seed(spec: &ExperimentSpec, seed: u64) -> Result<SeedOutcome> {
    spec.validate()?;
    SeedRun {
        spec,
        seed,
        dir: seed_dir(&spec.out, seed),
        events: Vec::new(),
    }
    .run()
}

/// Runs every seed of `spec` in order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<SeedOutcome>> {
    spec.validate()?;
    spec.seeds.iter().map(|&s| run_seed(spec, s)).collect()
}
