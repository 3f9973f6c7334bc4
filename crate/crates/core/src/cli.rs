//! The `snet` command-line driver. Every command reads one experiment config,
//! writes its outputs to `<out_dir>/<command>/` together with a copy of the
//! config and a `manifest.json`, and prints a one-line JSON summary.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use cpu_time::ProcessTime;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::analysis::{loss_stats, mean_offdiagonal, penultimate_csv, similarity_matrix, LossStats};
use crate::config::{ExperimentConfig, Splits, SupernetConfig};
use crate::data::Dataset;
use crate::ensemble::{build_supernet, compare, partition, retrain_supernet, Comparison, InitMode, RetrainConfig, SuperNetModel};
use crate::error::{Error, Result};
use crate::network::{penultimate_features, ModelParams, NetworkSpec};
use crate::persist::{self, Model};
use crate::rng::Rng;
use crate::snapshots::{harvest, snapshot_file_name, SnapshotConfig};
use crate::trainer::{self, descending_layer_training, evaluate, retrain_last_layer, write_metrics_csv, EvalReport, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "snet", version, about = "Train dense networks, partition them, and merge sub-models into SuperNets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a single network.
    Train { config: PathBuf },
    /// Split the network into `partition.k` branches and train each one.
    PartitionTrain { config: PathBuf },
    /// Merge branch checkpoints into a SuperNet, retrain its head, and compare.
    Supernet { config: PathBuf },
    /// Harvest cyclic-learning-rate snapshots from a trained model.
    Snapshot { config: PathBuf },
    /// Retrain only the softmax head of a checkpoint.
    RetrainLast { checkpoint: PathBuf, config: PathBuf },
    /// Train single layers from the output downwards.
    RetrainDescending { checkpoint: PathBuf, config: PathBuf },
    /// Accuracy, loss and per-example loss statistics of a checkpoint.
    Evaluate { checkpoint: PathBuf, config: PathBuf },
    /// Agreement matrix and per-example losses of several checkpoints.
    Analyze {
        /// Checkpoints followed by the config file.
        #[arg(required = true, num_args = 2..)]
        paths: Vec<PathBuf>,
    },
    /// train, snapshots, per-snapshot head retrain, SuperNet.
    Pipeline { config: PathBuf },
}

/// Parses `args`, runs the command and prints the summary or a single-line
/// JSON error to stderr. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid usage").trim_start_matches("error: ");
            eprintln!("{}", json!({"error": {"kind": "usage", "code": 1, "message": first}}));
            return 1;
        }
    };
    match run(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            let code = e.exit_code();
            eprintln!("{}", json!({"error": {"kind": e.kind(), "code": code, "message": e.to_string()}}));
            code
        }
    }
}

pub fn run(command: &Command) -> Result<Value> {
    match command {
        Command::Train { config } => cmd_train(config),
        Command::PartitionTrain { config } => cmd_partition_train(config),
        Command::Supernet { config } => cmd_supernet(config),
        Command::Snapshot { config } => cmd_snapshot(config),
        Command::RetrainLast { checkpoint, config } => cmd_retrain_last(checkpoint, config),
        Command::RetrainDescending { checkpoint, config } => cmd_retrain_descending(checkpoint, config),
        Command::Evaluate { checkpoint, config } => cmd_evaluate(checkpoint, config),
        Command::Analyze { paths } => {
            let (config, checkpoints) = paths.split_last().expect("clap enforces two paths");
            cmd_analyze(checkpoints, config)
        }
        Command::Pipeline { config } => cmd_pipeline(config),
    }
}

/// Seeds parameter initialisation; training itself uses `seed` directly.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ModelParams> {
    ModelParams::init(spec, &mut Rng::derive(seed, 0))
}

/// Threads for parallel branch training: `SNET_THREADS` if set, else `default`.
pub fn thread_count(default: usize) -> Result<usize> {
    match std::env::var("SNET_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("SNET_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(default.max(1)),
    }
}

/// Trains one session per spec in parallel; session `i` uses seed `base_seed + i`.
pub fn train_many(specs: &[NetworkSpec], splits: &Splits, base: &TrainConfig) -> Result<Vec<trainer::TrainOutcome>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(specs.len())?)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))?;
    pool.install(|| {
        specs
            .par_iter()
            .enumerate()
            .map(|(i, spec)| {
                let seed = base.seed.wrapping_add(i as u64);
                let cfg = TrainConfig { seed, ..base.clone() };
                trainer::train(init_params(spec, seed)?, spec, &splits.train, &splits.val, &cfg)
            })
            .collect()
    })
}

struct Run {
    dir: PathBuf,
    command: &'static str,
    clock: ProcessTime,
    manifest: Map<String, Value>,
    outputs: Vec<String>,
    results: Map<String, Value>,
}

impl Run {
    fn start(cfg: &ExperimentConfig, config_path: &Path, command: &'static str) -> Result<Run> {
        let dir = cfg.out_dir.join(command);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let copy = dir.join("config.toml");
        std::fs::copy(config_path, &copy).map_err(|e| Error::io(&copy, e))?;
        let mut manifest = Map::new();
        manifest.insert("command".into(), json!(command));
        manifest.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        manifest.insert("config".into(), json!(config_path.display().to_string()));
        manifest.insert(
            "seeds".into(),
            json!({"split": cfg.data.split.seed, "train": cfg.train.seed, "supernet": cfg.supernet.as_ref().map(|s| s.seed)}),
        );
        manifest.insert("data".into(), serde_json::to_value(&cfg.data).expect("serialisable"));
        Ok(Run { dir, command, clock: ProcessTime::now(), manifest, outputs: Vec::new(), results: Map::new() })
    }

    fn input(&mut self, key: &str, value: Value) {
        self.manifest.insert(key.into(), value);
    }

    fn output(&mut self, name: impl Into<String>) -> PathBuf {
        let name = name.into();
        let path = self.dir.join(&name);
        self.outputs.push(name);
        path
    }

    fn result(&mut self, key: &str, value: Value) {
        self.results.insert(key.into(), value);
    }

    fn finish(mut self) -> Result<Value> {
        let cpu = self.clock.elapsed().as_secs_f64();
        self.manifest.insert("outputs".into(), json!(self.outputs));
        self.manifest.insert("results".into(), Value::Object(self.results.clone()));
        self.manifest.insert("cpu_seconds".into(), json!(cpu));
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&Value::Object(self.manifest)).expect("serialisable");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(json!({"command": self.command, "run_dir": self.dir.display().to_string(), "cpu_seconds": cpu, "results": self.results}))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn load_network(path: &Path) -> Result<(ModelParams, NetworkSpec)> {
    persist::load_model(path)
}

fn check_fits(spec: &NetworkSpec, data: &Dataset, path: &Path) -> Result<()> {
    if spec.input_dim != data.dim() || spec.num_classes() != data.num_classes {
        return Err(Error::Shape(format!(
            "{} maps {} -> {} but the data has {} features and {} classes",
            path.display(),
            spec.input_dim,
            spec.num_classes(),
            data.dim(),
            data.num_classes
        )));
    }
    Ok(())
}

fn eval_json(r: &EvalReport) -> Value {
    json!({"accuracy": r.accuracy, "loss": r.loss})
}

fn cmd_train(config_path: &Path) -> Result<Value> {
    let cfg = ExperimentConfig::load(config_path)?;
    let splits = cfg.splits()?;
    let spec = cfg.network_spec(&splits.train)?;
    let mut run = Run::start(&cfg, config_path, "train")?;
    let outcome = trainer::train(init_params(&spec, cfg.train.seed)?, &spec, &splits.train, &splits.val, &cfg.train)?;
    persist::save_model(&outcome.params, &spec, &run.output("model.snet"))?;
    write_metrics_csv(&outcome.history, &run.output("metrics.csv"))?;
    let val = evaluate(&outcome.params, &spec, &splits.val)?;
    let test = evaluate(&outcome.params, &spec, &splits.test)?;
    run.result("epochs", json!(outcome.history.len()));
    run.result("best_epoch", json!(outcome.best_epoch));
    run.result("params", json!(spec.param_count()));
    run.result("val", eval_json(&val));
    run.result("test", eval_json(&test));
    run.finish()
}

fn cmd_partition_train(config_path: &Path) -> Result<Value> {
    let cfg = ExperimentConfig::load(config_path)?;
    let Some(part) = &cfg.partition else {
        return Err(Error::Config("partition-train needs a [partition] section".into()));
    };
    let splits = cfg.splits()?;
    let root = cfg.network_spec(&splits.train)?;
    let plan = partition(&root, part.k)?;
    let mut run = Run::start(&cfg, config_path, "partition-train")?;
    run.input("partition", json!({"k": plan.k, "branch_seeds": (0..plan.k).map(|i| cfg.train.seed.wrapping_add(i as u64)).collect::<Vec<_>>()}));
    let outcomes = train_many(&plan.branch_specs, &splits, &cfg.train)?;
    let mut branches = Vec::new();
    for (i, (spec, out)) in plan.branch_specs.iter().zip(&outcomes).enumerate() {
        persist::save_model(&out.params, spec, &run.output(format!("branch_{i}.snet")))?;
        write_metrics_csv(&out.history, &run.output(format!("branch_{i}_metrics.csv")))?;
        let test = evaluate(&out.params, spec, &splits.test)?;
        branches.push(json!({"branch": i, "epochs": out.history.len(), "test": eval_json(&test)}));
    }
    run.result("root_params", json!(root.param_count()));
    run.result("branch_params", json!(plan.branch_param_total()));
    run.result("branches", Value::Array(branches));
    run.finish()
}

fn retrain_config(cfg: &ExperimentConfig, s: &SupernetConfig) -> RetrainConfig {
    let mut train = cfg.train.clone();
    train.max_epochs = s.retrain_epochs;
    train.trainable = None;
    if let Some(o) = s.optimizer {
        train.optimizer = o;
        train.schedule = None;
    }
    RetrainConfig { train, l2: s.l2, l2_bias: s.l2_bias }
}

/// Comparison CSV: one row per branch, then the SuperNet before and after
/// head retraining, then both voting baselines. Vote rows have no loss.
fn comparison_csv(before: &[Comparison; 2], after: &[Comparison; 2]) -> String {
    let mut out = String::from("model,val_accuracy,test_accuracy,val_loss,test_loss\n");
    let [bv, bt] = before;
    let [av, at] = after;
    for (i, (v, t)) in av.branches.iter().zip(&at.branches).enumerate() {
        let _ = writeln!(out, "branch_{i},{},{},{},{}", v.accuracy, t.accuracy, v.loss, t.loss);
    }
    let _ = writeln!(out, "supernet_init,{},{},{},{}", bv.supernet.accuracy, bt.supernet.accuracy, bv.supernet.loss, bt.supernet.loss);
    let _ = writeln!(out, "supernet,{},{},{},{}", av.supernet.accuracy, at.supernet.accuracy, av.supernet.loss, at.supernet.loss);
    let _ = writeln!(out, "majority_vote,{},{},,", av.majority_accuracy, at.majority_accuracy);
    let _ = writeln!(out, "softmax_vote,{},{},,", av.softmax_vote_accuracy, at.softmax_vote_accuracy);
    out
}

fn comparison_json(c: &Comparison) -> Value {
    json!({
        "branches": c.branches.iter().map(|r| r.accuracy).collect::<Vec<_>>(),
        "supernet": c.supernet.accuracy,
        "majority_vote": c.majority_accuracy,
        "softmax_vote": c.softmax_vote_accuracy,
    })
}

/// Builds, scores, retrains and rescores a SuperNet; writes checkpoint,
/// metrics and the comparison CSV into `run`.
fn supernet_stage(run: &mut Run, cfg: &ExperimentConfig, s: &SupernetConfig, branches: &[(NetworkSpec, ModelParams)], splits: &Splits) -> Result<SuperNetModel> {
    let model = build_supernet(branches, s.init, &mut Rng::new(s.seed))?;
    let before = [compare(&model, branches, &splits.val)?, compare(&model, branches, &splits.test)?];
    let (model, history) = retrain_supernet(model, &splits.train, &splits.val, &retrain_config(cfg, s))?;
    let after = [compare(&model, branches, &splits.val)?, compare(&model, branches, &splits.test)?];
    persist::save_supernet(&model, &run.output("supernet.snet"))?;
    write_metrics_csv(&history, &run.output("supernet_metrics.csv"))?;
    write_text(&run.output("comparison.csv"), &comparison_csv(&before, &after))?;
    run.result("supernet_params", json!(model.param_count()));
    run.result("before_retrain", json!({"val": comparison_json(&before[0]), "test": comparison_json(&before[1])}));
    run.result("after_retrain", json!({"val": comparison_json(&after[0]), "test": comparison_json(&after[1])}));
    Ok(model)
}

fn cmd_supernet(config_path: &Path) -> Result<Value> {
    let cfg = ExperimentConfig::load(config_path)?;
    let Some(s) = &cfg.supernet else {
        return Err(Error::Config("supernet needs a [supernet] section".into()));
    };
    let paths: Vec<PathBuf> = if !s.branches.is_empty() {
        s.branches.clone()
    } else if let Some(p) = &cfg.partition {
        (0..p.k).map(|i| cfg.out_dir.join("partition-train").join(format!("branch_{i}.snet"))).collect()
    } else {
        return Err(Error::Config("supernet needs supernet.branches or a [partition] section".into()));
    };
    let splits = cfg.splits()?;
    let branches = paths.iter().map(|p| load_network(p).map(|(params, spec)| (spec, params))).collect::<Result<Vec<_>>>()?;
    for ((spec, _), p) in branches.iter().zip(&paths) {
        check_fits(spec, &splits.train, p)?;
    }
    let mut run = Run::start(&cfg, config_path, "supernet")?;
    run.input("branches", json!(paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>()));
    supernet_stage(&mut run, &cfg, s, &branches, &splits)?;
    run.finish()
}

fn snapshot_config(cfg: &ExperimentConfig, n_train: usize) -> Result<SnapshotConfig> {
    let Some(s) = &cfg.snapshot else {
        return Err(Error::Config("snapshot needs a [snapshot] section".into()));
    };
    let mut train = cfg.train.clone();
    if let Some(o) = s.optimizer {
        train.optimizer = o;
    }
    train.schedule = None;
    Ok(SnapshotConfig { cycle: s.schedule(n_train, train.batch_size)?, train, warmup_epochs: s.warmup_epochs, n_cycles: s.n_cycles })
}

fn cmd_snapshot(config_path: &Path) -> Result<Value> {
    let cfg = ExperimentConfig::load(config_path)?;
    let splits = cfg.splits()?;
    let scfg = snapshot_config(&cfg, splits.train.len())?;
    let source = cfg.snapshot.as_ref().and_then(|s| s.checkpoint.clone()).unwrap_or_else(|| cfg.out_dir.join("train").join("model.snet"));
    let (params, spec) = load_network(&source)?;
    check_fits(&spec, &splits.train, &source)?;
    let mut run = Run::start(&cfg, config_path, "snapshot")?;
    run.input("checkpoint", json!(source.display().to_string()));
    let h = harvest(params, &spec, &splits.train, &splits.val, &scfg)?;
    let mut table = String::from("cycle,step,lr,val_accuracy,val_loss\n");
    for s in &h.snapshots {
        persist::save_model(&s.params, &spec, &run.output(snapshot_file_name(s.cycle)))?;
        let _ = writeln!(table, "{},{},{},{},{}", s.cycle, s.step, s.lr, s.report.accuracy, s.report.loss);
    }
    write_metrics_csv(&h.history, &run.output("metrics.csv"))?;
    write_text(&run.output("snapshots.csv"), &table)?;
    run.result("snapshots", json!(h.snapshots.iter().map(|s| s.report.accuracy).collect::<Vec<_>>()));
    run.finish()
}

fn cmd_retrain_last(checkpoint: &Path, config_path: &Path) -> Result<Value> {
    let cfg = ExperimentConfig::load(config_path)?;
    let splits = cfg.splits()?;
    let (params, spec) = load_network(checkpoint)?;
    check_fits(&spec, &splits.train, checkpoint)?;
    let mut run = Run::start(&cfg, config_path, "retrain-last")?;
    run.input("checkpoint", json!(checkpoint.display().to_string()));
    let before = evaluate(&params, &spec, &splits.val)?;
    let out = retrain_last_layer(params, &spec, &splits.train, &splits.val, &cfg.train, cfg.retrain.epochs)?;
    let name = stem(checkpoint);
    persist::save_model(&out.params, &spec, &run.output(format!("{name}.snet")))?;
    write_metrics_csv(&out.history, &run.output(format!("{name}_metrics.csv")))?;
    run.result("val_before", eval_json(&before));
    run.result("val_after", eval_json(&evaluate(&out.params, &spec, &splits.val)?));
    run.result("test_after", eval_json(&evaluate(&out.params, &spec, &splits.test)?));
    run.finish()
}

fn cmd_retrain_descending(checkpoint: &Path, config_path: &Path) -> Result<Value> {
    let cfg = ExperimentConfig::load(config_path)?;
    let splits = cfg.splits()?;
    let (params, spec) = load_network(checkpoint)?;
    check_fits(&spec, &splits.train, checkpoint)?;
    let mut run = Run::start(&cfg, config_path, "retrain-descending")?;
    run.input("checkpoint", json!(checkpoint.display().to_string()));
    let before = evaluate(&params, &spec, &splits.val)?;
    let r = &cfg.retrain;
    let (params, stages) = descending_layer_training(params, &spec, &splits.train, &splits.val, r.depth, r.epochs_per_layer, &cfg.train)?;
    let name = stem(checkpoint);
    persist::save_model(&params, &spec, &run.output(format!("{name}.snet")))?;
    for s in &stages {
        write_metrics_csv(&s.history, &run.output(format!("{name}_layer{}_metrics.csv", s.layer)))?;
    }
    run.result("val_before", eval_json(&before));
    run.result("val_after", eval_json(&evaluate(&params, &spec, &splits.val)?));
    run.result("test_after", eval_json(&evaluate(&params, &spec, &splits.test)?));
    run.finish()
}

fn model_report(model: &Model, data: &Dataset, path: &Path) -> Result<EvalReport> {
    if model.input_dim() != data.dim() || model.num_classes() != data.num_classes {
        return Err(Error::Shape(format!("{} does not fit the configured data", path.display())));
    }
    EvalReport::from_probabilities(model.predict_proba(&data.features)?, &data.labels)
}

fn losses_csv(report: &EvalReport, labels: &[usize]) -> String {
    let mut out = String::from("index,label,prediction,loss\n");
    for (i, ((l, p), loss)) in labels.iter().zip(&report.predictions).zip(&report.per_example_losses).enumerate() {
        let _ = writeln!(out, "{i},{l},{p},{loss}");
    }
    out
}

fn stats_json(s: &LossStats) -> Value {
    json!({"mean": s.mean, "std": s.std, "p90": s.p90, "p95": s.p95})
}

fn cmd_evaluate(checkpoint: &Path, config_path: &Path) -> Result<Value> {
    let cfg = ExperimentConfig::load(config_path)?;
    let splits = cfg.splits()?;
    let model = persist::load(checkpoint)?;
    let which = cfg.analysis.split;
    let data = splits.get(which);
    data.require_non_empty("evaluation")?;
    let mut run = Run::start(&cfg, config_path, "evaluate")?;
    run.input("checkpoint", json!(checkpoint.display().to_string()));
    run.input("split", json!(which.name()));
    let report = model_report(&model, data, checkpoint)?;
    let stats = loss_stats(&report.per_example_losses)?;
    let name = stem(checkpoint);
    write_text(&run.output(format!("{name}_losses.csv")), &losses_csv(&report, &data.labels))?;
    write_text(&run.output(format!("{name}_loss_stats.csv")), &format!("{}\n{}\n", LossStats::CSV_HEADER, stats.csv_row()))?;
    run.result("split", json!(which.name()));
    run.result("model", json!(model.kind()));
    run.result("accuracy", json!(report.accuracy));
    run.result("loss", json!(report.loss));
    run.result("loss_stats", stats_json(&stats));
    run.finish()
}

fn cmd_analyze(checkpoints: &[PathBuf], config_path: &Path) -> Result<Value> {
    let cfg = ExperimentConfig::load(config_path)?;
    let splits = cfg.splits()?;
    let which = cfg.analysis.split;
    let data = splits.get(which);
    data.require_non_empty("analysis")?;
    let models = checkpoints.iter().map(|p| persist::load(p)).collect::<Result<Vec<_>>>()?;
    let mut run = Run::start(&cfg, config_path, "analyze")?;
    run.input("checkpoints", json!(checkpoints.iter().map(|p| p.display().to_string()).collect::<Vec<_>>()));
    run.input("split", json!(which.name()));
    let mut predictions = Vec::with_capacity(models.len());
    let mut per_model = Vec::new();
    for (i, (m, p)) in models.iter().zip(checkpoints).enumerate() {
        let report = model_report(m, data, p)?;
        write_text(&run.output(format!("model{i}_losses.csv")), &losses_csv(&report, &data.labels))?;
        if cfg.analysis.export_features {
            let features = match m {
                Model::Network { spec, params } => penultimate_features(params, spec, &data.features)?,
                Model::SuperNet(s) => s.features(&data.features)?,
            };
            write_text(&run.output(format!("model{i}_features.csv")), &penultimate_csv(&features, &data.labels))?;
        }
        per_model.push(json!({"checkpoint": p.display().to_string(), "accuracy": report.accuracy, "loss_stats": stats_json(&loss_stats(&report.per_example_losses)?)}));
        predictions.push(report.predictions);
    }
    if predictions.len() >= 2 {
        let sim = similarity_matrix(&predictions)?;
        write_text(&run.output("similarity.csv"), &sim.to_csv())?;
        run.result("mean_offdiagonal", json!(mean_offdiagonal(&sim)?));
    }
    run.result("split", json!(which.name()));
    run.result("models", Value::Array(per_model));
    run.finish()
}

fn cmd_pipeline(config_path: &Path) -> Result<Value> {
    let cfg = ExperimentConfig::load(config_path)?;
    let splits = cfg.splits()?;
    let spec = cfg.network_spec(&splits.train)?;
    let scfg = snapshot_config(&cfg, splits.train.len())?;
    let mut run = Run::start(&cfg, config_path, "pipeline")?;

    let base = trainer::train(init_params(&spec, cfg.train.seed)?, &spec, &splits.train, &splits.val, &cfg.train)?;
    persist::save_model(&base.params, &spec, &run.output("model.snet"))?;
    write_metrics_csv(&base.history, &run.output("metrics.csv"))?;
    run.result("base_val", eval_json(&evaluate(&base.params, &spec, &splits.val)?));

    let r = &cfg.retrain;
    let h = harvest(base.params, &spec, &splits.train, &splits.val, &scfg)?;
    write_metrics_csv(&h.history, &run.output("snapshot_metrics.csv"))?;
    let mut branches = Vec::with_capacity(h.snapshots.len());
    for s in h.snapshots {
        persist::save_model(&s.params, &spec, &run.output(snapshot_file_name(s.cycle)))?;
        let out = retrain_last_layer(s.params, &spec, &splits.train, &splits.val, &cfg.train, r.epochs)?;
        persist::save_model(&out.params, &spec, &run.output(format!("snapshot_{}_retrained.snet", s.cycle)))?;
        branches.push((spec.clone(), out.params));
    }
    let default_s = SupernetConfig {
        branches: Vec::new(),
        init: InitMode::scaled(branches.len() as f64),
        retrain_epochs: crate::trainer::DEFAULT_RETRAIN_EPOCHS,
        l2: 0.0,
        l2_bias: false,
        optimizer: None,
        seed: 0,
    };
    let s = cfg.supernet.clone().unwrap_or(default_s);
    supernet_stage(&mut run, &cfg, &s, &branches, &splits)?;
    run.finish()
}
