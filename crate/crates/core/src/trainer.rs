//! Mini-batch training with early stopping and layer freezing, the
//! last-layer and descending layer-by-layer schedules, and evaluation.

use std::fmt::Write as _;
use std::path::Path;

use cpu_time::ThreadTime;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{self, backward, forward, per_example_cross_entropy, Mode, ModelParams, NetworkSpec};
use crate::optim::{self, LrSchedule, OptimizerSpec, OptimizerState};
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Improvement below this does not reset the patience counter.
pub const MIN_DELTA: f64 = 1e-6;

/// Epochs used by `retrain_last_layer` when the caller does not say otherwise.
pub const DEFAULT_RETRAIN_EPOCHS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerSpec,
    /// Defaults to a constant schedule at `optimizer.lr`.
    #[serde(default)]
    pub schedule: Option<LrSchedule>,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[serde(default)]
    pub patience: usize,
    /// Per-layer trainable flags; `None` trains every layer.
    #[serde(default)]
    pub trainable: Option<Vec<bool>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_shuffle")]
    pub shuffle: bool,
}

fn default_shuffle() -> bool {
    true
}

impl TrainConfig {
    pub fn new(optimizer: OptimizerSpec, batch_size: usize, max_epochs: usize) -> Self {
        TrainConfig { optimizer, schedule: None, batch_size, max_epochs, patience: 0, trainable: None, seed: 0, shuffle: true }
    }

    pub fn with_patience(mut self, patience: usize) -> Self {
        self.patience = patience;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_schedule(mut self, schedule: LrSchedule) -> Self {
        self.schedule = Some(schedule);
        self
    }

    pub fn with_trainable(mut self, mask: Vec<bool>) -> Self {
        self.trainable = Some(mask);
        self
    }

    pub fn schedule(&self) -> LrSchedule {
        self.schedule.unwrap_or(LrSchedule::Constant { lr: self.optimizer.lr })
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.schedule().validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        Ok(())
    }

    fn mask_for(&self, spec: &NetworkSpec) -> Result<Vec<bool>> {
        match &self.trainable {
            None => Ok(vec![true; spec.num_layers()]),
            Some(m) if m.len() == spec.num_layers() => Ok(m.clone()),
            Some(m) => Err(Error::config(format!("trainable mask has {} entries for {} layers", m.len(), spec.num_layers()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rate of the epoch's final step.
    pub lr: f64,
    /// CPU time of the training thread since the session started.
    pub elapsed_cpu_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,lr,cpu_seconds";

pub fn metrics_csv(history: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr, r.elapsed_cpu_seconds
        );
    }
    out
}

pub fn write_metrics_csv(history: &[MetricsRecord], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(history)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub per_example_losses: Vec<f64>,
    pub predictions: Vec<usize>,
    pub probabilities: Matrix,
}

impl EvalReport {
    pub fn from_probabilities(probabilities: Matrix, labels: &[usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::data("evaluation dataset is empty"));
        }
        let per_example_losses = per_example_cross_entropy(&probabilities, labels)?;
        let predictions = probabilities.argmax_rows();
        let loss = per_example_losses.iter().sum::<f64>() / labels.len() as f64;
        let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(EvalReport {
            loss,
            accuracy: correct as f64 / labels.len() as f64,
            per_example_losses,
            predictions,
            probabilities,
        })
    }
}

/// Eval-mode forward over the whole dataset.
pub fn evaluate(params: &ModelParams, spec: &NetworkSpec, dataset: &Dataset) -> Result<EvalReport> {
    dataset.require_non_empty("evaluation")?;
    let probs = network::predict_proba(params, spec, &dataset.features)?;
    EvalReport::from_probabilities(probs, &dataset.labels)
}

/// Patience bookkeeping over a stream of validation losses.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    wait: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: 0, wait: 0 }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    /// `epoch` is 1-based.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best - MIN_DELTA || (self.best.is_infinite() && val_loss.is_finite()) {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.wait = 0;
            return StopDecision::Improved;
        }
        self.wait += 1;
        if self.patience > 0 && self.wait >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<MetricsRecord>,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_acc: f64,
    pub last_lr: f64,
}

/// One optimisation session: owns the optimizer state, the shuffling/dropout
/// stream, and the global step counter that drives the learning-rate schedule.
#[derive(Debug, Clone)]
pub struct Session {
    spec: NetworkSpec,
    optimizer: OptimizerSpec,
    schedule: LrSchedule,
    batch_size: usize,
    shuffle: bool,
    trainable: Vec<bool>,
    state: OptimizerState,
    rng: Rng,
    step: u64,
    /// Global step at which the current schedule started.
    origin: u64,
    clock: ThreadTime,
}

impl Session {
    pub fn new(spec: &NetworkSpec, params: &ModelParams, config: &TrainConfig) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        params.check(spec)?;
        Ok(Session {
            spec: spec.clone(),
            optimizer: config.optimizer,
            schedule: config.schedule(),
            batch_size: config.batch_size,
            shuffle: config.shuffle,
            trainable: config.mask_for(spec)?,
            state: OptimizerState::new(&config.optimizer, params),
            rng: Rng::new(config.seed),
            step: 0,
            origin: 0,
            clock: ThreadTime::now(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Switches schedule; the new one starts from its own step 0.
    pub fn set_schedule(&mut self, schedule: LrSchedule) -> Result<()> {
        schedule.validate()?;
        self.schedule = schedule;
        self.origin = self.step;
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.schedule.lr_at(self.step - self.origin)
    }

    pub fn schedule(&self) -> LrSchedule {
        self.schedule
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn cpu_seconds(&self) -> f64 {
        self.clock.elapsed().as_secs_f64()
    }

    /// One pass over `data`. `after_step(step, lr, params)` runs after every
    /// optimizer update, with `step` counted from the start of the current
    /// schedule; returning `Ok(false)` ends the epoch early.
    pub fn run_epoch(
        &mut self,
        params: &mut ModelParams,
        data: &Dataset,
        mut after_step: impl FnMut(u64, f64, &ModelParams) -> Result<bool>,
    ) -> Result<EpochStats> {
        data.require_non_empty("training")?;
        if data.dim() != self.spec.input_dim || data.num_classes != self.spec.num_classes() {
            return Err(Error::shape(format!(
                "dataset {}x{} ({} classes) does not fit network {} -> {}",
                data.len(),
                data.dim(),
                data.num_classes,
                self.spec.input_dim,
                self.spec.num_classes()
            )));
        }
        let order: Vec<usize> = if self.shuffle { self.rng.permutation(data.len()) } else { (0..data.len()).collect() };
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut last_lr = self.lr();
        let mut seen = 0usize;
        for batch in order.chunks(self.batch_size) {
            let x = data.features.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let cache = forward(params, &self.spec, &x, Mode::Train, &mut self.rng)?;
            let probs = cache.probs();
            loss_sum += per_example_cross_entropy(probs, &y)?.iter().sum::<f64>();
            correct += probs.argmax_rows().iter().zip(&y).filter(|(p, l)| p == l).count();
            let grads = backward(&cache, params, &self.spec, &y, &self.trainable)?;
            let lr = self.lr();
            optim::step(&self.optimizer, &mut self.state, params, &grads, lr, &self.trainable)?;
            let go_on = after_step(self.step - self.origin, lr, params)?;
            last_lr = lr;
            self.step += 1;
            seen += batch.len();
            if !go_on {
                break;
            }
        }
        Ok(EpochStats { train_loss: loss_sum / seen as f64, train_acc: correct as f64 / seen as f64, last_lr })
    }

    /// Runs an epoch and evaluates on `val`, producing a metrics row.
    pub fn epoch_with_metrics(
        &mut self,
        epoch: usize,
        params: &mut ModelParams,
        train: &Dataset,
        val: &Dataset,
        after_step: impl FnMut(u64, f64, &ModelParams) -> Result<bool>,
    ) -> Result<MetricsRecord> {
        let stats = self.run_epoch(params, train, after_step)?;
        if !stats.train_loss.is_finite() {
            return Err(Error::Numeric(format!("training loss became non-finite in epoch {epoch}")));
        }
        let report = evaluate(params, &self.spec, val)?;
        if !report.loss.is_finite() {
            return Err(Error::Numeric(format!("validation loss became non-finite in epoch {epoch}")));
        }
        Ok(MetricsRecord {
            epoch,
            train_loss: stats.train_loss,
            train_acc: stats.train_acc,
            val_loss: report.loss,
            val_acc: report.accuracy,
            lr: stats.last_lr,
            elapsed_cpu_seconds: self.cpu_seconds(),
        })
    }
}

/// Trains until `max_epochs` or early stop. With `patience > 0` the
/// parameters from the epoch with the best validation loss are returned.
pub fn train(
    params: ModelParams,
    spec: &NetworkSpec,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_set.require_non_empty("training")?;
    val_set.require_non_empty("validation")?;
    let mut params = params;
    let mut session = Session::new(spec, &params, config)?;
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best: Option<ModelParams> = None;
    let mut history = Vec::with_capacity(config.max_epochs);
    for epoch in 1..=config.max_epochs {
        let record = session.epoch_with_metrics(epoch, &mut params, train_set, val_set, |_, _, _| Ok(true))?;
        let decision = stopper.observe(epoch, record.val_loss);
        history.push(record);
        match decision {
            StopDecision::Improved if config.patience > 0 => best = Some(params.clone()),
            StopDecision::Stop => break,
            _ => {}
        }
    }
    if let Some(best) = best {
        params = best;
    }
    Ok(TrainOutcome { params, history, best_epoch: stopper.best_epoch() })
}

/// Freezes everything but the softmax head and trains it for `epochs` epochs
/// with a fresh optimizer state. Zero epochs returns the input unchanged.
pub fn retrain_last_layer(
    params: ModelParams,
    spec: &NetworkSpec,
    train_set: &Dataset,
    val_set: &Dataset,
    base: &TrainConfig,
    epochs: usize,
) -> Result<TrainOutcome> {
    if epochs == 0 {
        return Ok(TrainOutcome { params, history: Vec::new(), best_epoch: 0 });
    }
    let n = spec.num_layers();
    let mut config = base.clone();
    config.max_epochs = epochs;
    config.trainable = Some((0..n).map(|i| i + 1 == n).collect());
    train(params, spec, train_set, val_set, &config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    /// Index of the layer trained in this stage (0 = first hidden layer).
    pub layer: usize,
    pub history: Vec<MetricsRecord>,
}

/// For k = 1..=depth, trains only the k-th layer from the output for
/// `epochs_per_layer` epochs, each stage with its own fresh optimizer.
pub fn descending_layer_training(
    params: ModelParams,
    spec: &NetworkSpec,
    train_set: &Dataset,
    val_set: &Dataset,
    depth: usize,
    epochs_per_layer: usize,
    base: &TrainConfig,
) -> Result<(ModelParams, Vec<StageOutcome>)> {
    let n = spec.num_layers();
    if depth > n {
        return Err(Error::config(format!("descending depth {depth} exceeds the {n} layers")));
    }
    let mut params = params;
    let mut stages = Vec::with_capacity(depth);
    if epochs_per_layer == 0 {
        return Ok((params, stages));
    }
    for k in 1..=depth {
        let layer = n - k;
        let mut config = base.clone();
        config.max_epochs = epochs_per_layer;
        config.trainable = Some((0..n).map(|i| i == layer).collect());
        config.seed = base.seed.wrapping_add(k as u64);
        let outcome = train(params, spec, train_set, val_set, &config)?;
        params = outcome.params;
        stages.push(StageOutcome { layer, history: outcome.history });
    }
    Ok((params, stages))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, synth_blobs, SplitSpec};

    fn blobs() -> (Dataset, Dataset) {
        let ds = synth_blobs(400, 4, 2, 5.0, 1).unwrap();
        let (a, b, _) = split(&ds, &SplitSpec::new(0.75, 0.25, 0.0, 2, true)).unwrap();
        (a, b)
    }

    #[test]
    fn patience_example() {
        let mut es = EarlyStopping::new(2);
        let decisions: Vec<_> = [1.0, 0.9, 0.95, 0.96, 0.97].iter().enumerate().map(|(i, &l)| es.observe(i + 1, l)).collect();
        assert_eq!(decisions[..4], [StopDecision::Improved, StopDecision::Improved, StopDecision::Continue, StopDecision::Stop]);
        assert_eq!(es.best_epoch(), 2);
    }

    #[test]
    fn ties_count_toward_patience() {
        let mut es = EarlyStopping::new(1);
        es.observe(1, 0.5);
        assert_eq!(es.observe(2, 0.5 - 1e-7), StopDecision::Stop);
    }

    #[test]
    fn single_epoch_one_record() {
        let (tr, va) = blobs();
        let spec = NetworkSpec::mlp(4, &[8], 2, 0.0, 0.0);
        let p = ModelParams::init(&spec, &mut Rng::new(0)).unwrap();
        let out = train(p, &spec, &tr, &va, &TrainConfig::new(OptimizerSpec::adam(0.01), 32, 1)).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.history[0].epoch, 1);
    }

    #[test]
    fn empty_dataset_rejected() {
        let (tr, va) = blobs();
        let spec = NetworkSpec::mlp(4, &[8], 2, 0.0, 0.0);
        let p = ModelParams::init(&spec, &mut Rng::new(0)).unwrap();
        let empty = tr.subset(&[]);
        let cfg = TrainConfig::new(OptimizerSpec::adam(0.01), 32, 1);
        assert!(matches!(train(p.clone(), &spec, &empty, &va, &cfg), Err(Error::Data(_))));
        assert!(matches!(evaluate(&p, &spec, &empty), Err(Error::Data(_))));
    }

    #[test]
    fn diverging_training_reports_epoch() {
        let (tr, va) = blobs();
        let spec = NetworkSpec::mlp(4, &[8], 2, 0.0, 0.0);
        let mut p = ModelParams::init(&spec, &mut Rng::new(0)).unwrap();
        p.layers[0].weight.map_inplace(|w| w * 1e300);
        let cfg = TrainConfig::new(OptimizerSpec::sgd(1e10, 0.0), 32, 3);
        let err = train(p, &spec, &tr, &va, &cfg).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn restores_best_epoch_params() {
        let (tr, va) = blobs();
        let spec = NetworkSpec::mlp(4, &[16], 2, 0.0, 0.0);
        let p = ModelParams::init(&spec, &mut Rng::new(0)).unwrap();
        // a huge learning rate makes validation loss bounce around
        let cfg = TrainConfig::new(OptimizerSpec::sgd(3.0, 0.0), 16, 12).with_patience(3).with_seed(5);
        let out = train(p, &spec, &tr, &va, &cfg).unwrap();
        let best = out.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        let got = evaluate(&out.params, &spec, &va).unwrap().loss;
        assert_eq!(got, best);
        assert_eq!(out.history[out.best_epoch - 1].val_loss, best);
    }

    #[test]
    fn eval_report_contract() {
        let probs = Matrix::filled(4, 10, 0.1);
        let r = EvalReport::from_probabilities(probs, &[0, 3, 9, 2]).unwrap();
        for &l in &r.per_example_losses {
            assert!((l - 10f64.ln()).abs() < 1e-12);
        }
        let mean = r.per_example_losses.iter().sum::<f64>() / 4.0;
        assert!((mean - r.loss).abs() < 1e-12);
        assert_eq!(r.predictions, vec![0; 4]);
        let onehot = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(EvalReport::from_probabilities(onehot, &[1, 0]).unwrap().accuracy, 1.0);
    }

    #[test]
    fn metrics_csv_layout() {
        let rec = MetricsRecord { epoch: 1, train_loss: 0.5, train_acc: 0.75, val_loss: 0.25, val_acc: 1.0, lr: 0.001, elapsed_cpu_seconds: 2.0 };
        assert_eq!(metrics_csv(&[rec]), "epoch,train_loss,train_acc,val_loss,val_acc,lr,cpu_seconds\n1,0.5,0.75,0.25,1,0.001,2\n");
    }

    #[test]
    fn retrain_zero_epochs_is_identity() {
        let (tr, va) = blobs();
        let spec = NetworkSpec::mlp(4, &[8], 2, 0.0, 0.0);
        let p = ModelParams::init(&spec, &mut Rng::new(0)).unwrap();
        let out = retrain_last_layer(p.clone(), &spec, &tr, &va, &TrainConfig::new(OptimizerSpec::adam(0.01), 32, 5), 0).unwrap();
        assert_eq!(out.params, p);
        assert!(out.history.is_empty());
    }

    #[test]
    fn descending_depth_checks() {
        let (tr, va) = blobs();
        let spec = NetworkSpec::mlp(4, &[8], 2, 0.0, 0.0);
        let p = ModelParams::init(&spec, &mut Rng::new(0)).unwrap();
        let cfg = TrainConfig::new(OptimizerSpec::adam(0.01), 32, 5);
        let (same, stages) = descending_layer_training(p.clone(), &spec, &tr, &va, 0, 3, &cfg).unwrap();
        assert_eq!(same, p);
        assert!(stages.is_empty());
        assert!(matches!(descending_layer_training(p, &spec, &tr, &va, 3, 1, &cfg), Err(Error::Config(_))));
    }
}
