//! Snapshot harvesting: keep training a model under a cyclic learning rate
//! and keep a copy of the parameters at the end of every cycle.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{ModelParams, NetworkSpec};
use crate::optim::LrSchedule;
use crate::trainer::{evaluate, EvalReport, MetricsRecord, Session, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotConfig {
    /// Optimizer, batch size and seed; the schedule and epoch fields are
    /// replaced by the warmup and the cycles below.
    pub train: TrainConfig,
    /// Epochs at the optimizer's constant lr before cycling starts.
    #[serde(default)]
    pub warmup_epochs: usize,
    pub n_cycles: usize,
    pub cycle: LrSchedule,
}

impl SnapshotConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.cycle.is_cyclic() {
            return Err(Error::config("snapshot harvesting needs a cyclic learning-rate schedule"));
        }
        self.cycle.validate()?;
        if self.n_cycles == 0 {
            return Err(Error::config("n_cycles must be at least 1"));
        }
        let mut tc = self.train.clone();
        tc.schedule = None;
        tc.max_epochs = tc.max_epochs.max(1);
        tc.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// 1-based cycle index.
    pub cycle: usize,
    /// Step within the cyclic schedule at which the copy was taken.
    pub step: u64,
    pub lr: f64,
    pub params: ModelParams,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Harvest {
    pub snapshots: Vec<Snapshot>,
    pub history: Vec<MetricsRecord>,
    /// Live parameters when harvesting stopped (equal to the last snapshot).
    pub params: ModelParams,
}

/// Runs the warmup, then `n_cycles` cycles as one continuous optimizer
/// trajectory, copying the parameters at each cycle's lr_min step.
pub fn harvest(
    params: ModelParams,
    spec: &NetworkSpec,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &SnapshotConfig,
) -> Result<Harvest> {
    cfg.validate()?;
    train_set.require_non_empty("training")?;
    val_set.require_non_empty("validation")?;
    let mut tc = cfg.train.clone();
    tc.schedule = None;
    tc.max_epochs = tc.max_epochs.max(1);
    let mut params = params;
    let mut session = Session::new(spec, &params, &tc)?;
    let mut history = Vec::new();
    let mut epoch = 0;
    for _ in 0..cfg.warmup_epochs {
        epoch += 1;
        history.push(session.epoch_with_metrics(epoch, &mut params, train_set, val_set, |_, _, _| Ok(true))?);
    }

    session.set_schedule(cfg.cycle)?;
    let mut taken: Vec<(u64, f64, ModelParams)> = Vec::with_capacity(cfg.n_cycles);
    while taken.len() < cfg.n_cycles {
        epoch += 1;
        let record = session.epoch_with_metrics(epoch, &mut params, train_set, val_set, |step, lr, p| {
            if cfg.cycle.is_cycle_end(step) {
                taken.push((step, lr, p.clone()));
            }
            Ok(taken.len() < cfg.n_cycles)
        })?;
        history.push(record);
    }

    let snapshots = taken
        .into_iter()
        .enumerate()
        .map(|(i, (step, lr, p))| {
            let report = evaluate(&p, spec, val_set)?;
            Ok(Snapshot { cycle: i + 1, step, lr, params: p, report })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Harvest { snapshots, history, params })
}

pub fn snapshot_file_name(cycle: usize) -> String {
    format!("snapshot_{cycle}.snet")
}
