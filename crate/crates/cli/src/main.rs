use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use retentive::detector::{load_checkpoint, ClassifierKind, HeadDomain, RpnStrategy};
use retentive::eval::{run_inference, EvalReport};
use retentive::experiment::{
    multirun, read_report, run_experiment, seed_dir, Ablation, AblationGrid, Aggregate, ExperimentConfig,
    ExperimentSpec, SeedOutcome, StageName, StageStatus, CHECKPOINT_FILE,
};
use retentive::losses::ConsistencyVariant;
use retentive::synthgen::load_dataset;
use retentive::trainer::dataset_features;
use retentive::Error;

/// Few-shot detection experiments on a synthetic shapes benchmark.
#[derive(Parser)]
#[command(name = "retentive", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the base-train, k-shot and test sets.
    GenData(Common),
    /// Pretrain the base detector (generating data if needed).
    Pretrain(Common),
    /// Finetune the retentive model.
    Finetune(Common),
    /// Run inference and write the detections of every test image.
    Detect(DetectArgs),
    /// Evaluate the base detector and the finetuned model.
    Eval(Common),
    /// Run the ablation grid; axes without a flag span every value.
    Ablate(Common),
    /// Run several seeds and aggregate their metrics.
    Multirun(Common),
    /// Print the metrics found under the output directory.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file with [data], [arch], [train] and [detect] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Comma-separated stages to execute: gen-data, pretrain, finetune, eval.
    #[arg(long, value_delimiter = ',')]
    stage: Vec<StageName>,
    /// max, arith-avg, geo-avg or base-only (comma-separated for ablate).
    #[arg(long, value_delimiter = ',')]
    rpn_strategy: Vec<RpnStrategy>,
    /// kldiv, l1, cos or off.
    #[arg(long, value_delimiter = ',', value_parser = parse_consistency)]
    consistency: Vec<Option<ConsistencyVariant>>,
    /// cos or fc.
    #[arg(long, value_delimiter = ',')]
    classifier: Vec<ClassifierKind>,
    /// all or novel-only.
    #[arg(long, value_delimiter = ',')]
    head_domain: Vec<HeadDomain>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    shots: Option<usize>,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    common: Common,
    /// Model to run; defaults to the finetuned checkpoint of the selected
    /// setting under the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory; defaults to the seed's test set.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Where to write the detections; defaults to detections.json beside
    /// the checkpoint.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_consistency(s: &str) -> Result<Option<ConsistencyVariant>, String> {
    ConsistencyVariant::parse_setting(s).map_err(|e| e.to_string())
}

impl Common {
    fn config(&self) -> retentive::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(l) = self.lambda {
            cfg.train.lambda = l;
        }
        if let Some(k) = self.shots {
            cfg.data.shots = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn seeds(&self, default: &[u64]) -> Vec<u64> {
        match (self.seed, self.seeds.is_empty()) {
            (Some(s), _) => vec![s],
            (None, false) => self.seeds.clone(),
            (None, true) => default.to_vec(),
        }
    }

    /// Grid from the axis flags. Unset axes keep the configured value, or
    /// span the whole axis when `full` is set.
    fn grid(&self, cfg: &ExperimentConfig, full: bool) -> AblationGrid {
        let own = Ablation::of(cfg);
        fn pick<T: Copy>(given: &[T], own: T, all: &[T], full: bool) -> Vec<T> {
            if !given.is_empty() {
                given.to_vec()
            } else if full {
                all.to_vec()
            } else {
                vec![own]
            }
        }
        let consistency = [
            Some(ConsistencyVariant::Kldiv),
            Some(ConsistencyVariant::L1),
            Some(ConsistencyVariant::Cos),
            None,
        ];
        AblationGrid {
            rpn_strategy: pick(&self.rpn_strategy, own.rpn_strategy, &RpnStrategy::ALL, full),
            consistency: pick(&self.consistency, own.consistency, &consistency, full),
            classifier: pick(&self.classifier, own.classifier, &[ClassifierKind::Cos, ClassifierKind::Fc], full),
            head_domain: pick(&self.head_domain, own.head_domain, &[HeadDomain::All, HeadDomain::NovelOnly], full),
        }
    }

    /// The single setting of a non-ablation command, folded into the config.
    fn single(&self, cfg: ExperimentConfig) -> retentive::Result<ExperimentConfig> {
        let grid = self.grid(&cfg, false);
        if grid.len() != 1 {
            return Err(Error::Config("list-valued setting flags are only accepted by `ablate`".into()));
        }
        let a = grid.iter().next().expect("one grid point");
        Ok(a.apply(&cfg))
    }

    fn spec(&self, upto: StageName, full_grid: bool, default_seeds: &[u64]) -> retentive::Result<ExperimentSpec> {
        let mut cfg = self.config()?;
        let grid = if full_grid {
            self.grid(&cfg, true)
        } else {
            cfg = self.single(cfg)?;
            AblationGrid::single(Ablation::of(&cfg))
        };
        let mut spec = ExperimentSpec::new(cfg, self.seeds(default_seeds), &self.out);
        spec.grid = grid;
        spec.stages = if self.stage.is_empty() { upto.through() } else { self.stage.clone() };
        Ok(spec)
    }
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn print_report(label: &str, r: &EvalReport) {
    println!(
        "{label}: AP {} bAP {} nAP {} | AP50 {} | proposal AR@100 {} uAR@100 {} | detection AR@100 {} uAR@100 {}",
        fmt_metric(r.summary.ap),
        fmt_metric(r.summary.bap),
        fmt_metric(r.summary.nap),
        fmt_metric(r.summary_50.ap),
        fmt_metric(r.proposals.all.at_100),
        fmt_metric(r.proposals.unseen.at_100),
        fmt_metric(r.detections.all.at_100),
        fmt_metric(r.detections.unseen.at_100),
    );
}

fn print_outcome(o: &SeedOutcome) {
    for e in &o.events {
        let status = match e.status {
            StageStatus::Computed => "computed",
            StageStatus::Skipped => "up to date",
        };
        println!("seed {} {:<8} {:<10} {}", o.seed, e.stage, status, e.dir.display());
    }
    if let Some(r) = &o.base_report {
        println!("seed {} base", o.seed);
        print_report("  base", r);
    }
    for run in &o.runs {
        if let Some(r) = &run.report {
            print_report(&format!("  {}", run.tag), r);
        }
    }
}

fn print_aggregate(agg: &Aggregate) {
    let seeds: Vec<String> = agg.seeds.iter().map(|s| s.to_string()).collect();
    println!("seeds {}{}", seeds.join(","), if agg.complete { "" } else { " (incomplete)" });
    for f in &agg.failures {
        println!("  seed {} failed: {}", f.seed, f.error);
    }
    for r in &agg.rows {
        println!("{:<40} {:<18} n={} mean {} std {}", r.model, r.metric, r.n, fmt_metric(r.mean), fmt_metric(r.std));
    }
}

fn detect(args: &DetectArgs) -> retentive::Result<()> {
    let c = &args.common;
    let cfg = c.single(c.config()?)?;
    let seed = c.seeds(&[0])[0];
    let tag = Ablation::of(&cfg).tag();
    let root = seed_dir(&c.out, seed);
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| root.join(&tag).join("finetune").join(CHECKPOINT_FILE));
    let data = args.data.clone().unwrap_or_else(|| root.join("data").join("test"));
    let model = load_checkpoint(&ckpt)?;
    let ds = load_dataset(&data)?;
    let feats = dataset_features(&model, &ds)?;
    let outs = run_inference(&model, &feats, &cfg.detect)?;
    let dets: Vec<_> = outs.into_iter().map(|o| o.detections).collect();
    let output = args
        .output
        .clone()
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("detections.json"));
    std::fs::write(&output, serde_json::to_string_pretty(&dets)? + "\n")?;
    let n: usize = dets.iter().map(Vec::len).sum();
    println!("{n} detections on {} images written to {}", dets.len(), output.display());
    Ok(())
}

fn report(out: &Path) -> retentive::Result<()> {
    let agg_path = out.join("aggregate.json");
    if agg_path.exists() {
        let agg: Aggregate = serde_json::from_slice(&std::fs::read(agg_path)?)?;
        print_aggregate(&agg);
        return Ok(());
    }
    let mut found = false;
    let mut seeds: Vec<PathBuf> = std::fs::read_dir(out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed-")))
        .collect();
    seeds.sort();
    for seed in seeds {
        let mut dirs = vec![seed.join("pretrain").join("eval")];
        let mut tags: Vec<PathBuf> = std::fs::read_dir(&seed)?
            .filter_map(|e| e.ok().map(|e| e.path().join("eval")))
            .filter(|p| p.join("report.json").exists())
            .collect();
        tags.sort();
        dirs.extend(tags);
        for d in dirs.iter().filter(|d| d.join("report.json").exists()) {
            let r = read_report(d)?;
            found = true;
            print_report(&d.display().to_string(), &r);
        }
    }
    if !found {
        return Err(Error::State(format!("no reports under {}", out.display())));
    }
    Ok(())
}

fn run(cli: Cli) -> retentive::Result<()> {
    match cli.command {
        Command::GenData(c) => run_experiment(&c.spec(StageName::GenData, false, &[0])?).map(|o| o.iter().for_each(print_outcome)),
        Command::Pretrain(c) => run_experiment(&c.spec(StageName::Pretrain, false, &[0])?).map(|o| o.iter().for_each(print_outcome)),
        Command::Finetune(c) => run_experiment(&c.spec(StageName::Finetune, false, &[0])?).map(|o| o.iter().for_each(print_outcome)),
        Command::Eval(c) => run_experiment(&c.spec(StageName::Eval, false, &[0])?).map(|o| o.iter().for_each(print_outcome)),
        Command::Ablate(c) => run_experiment(&c.spec(StageName::Eval, true, &[0])?).map(|o| o.iter().for_each(print_outcome)),
        Command::Multirun(c) => multirun(&c.spec(StageName::Eval, false, &[0, 1, 2, 3, 4])?).map(|a| print_aggregate(&a)),
        Command::Detect(a) => detect(&a),
        Command::Report(a) => report(&a.out),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Param(_) => 2,
        Error::Training { .. } | Error::Numeric(_) => 3,
        Error::Staleness(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("RETENTIVE_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            }
            _ => {
                eprintln!("error: RETENTIVE_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
