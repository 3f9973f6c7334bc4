//! Experiment configuration files (TOML).
//!
//! Relative paths inside a config file are resolved against the directory
//! that contains the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, SplitSpec};
use crate::ensemble::InitMode;
use crate::error::{Error, Result};
use crate::network::{Activation, LayerSpec, NetworkSpec};
use crate::optim::{CycleShape, LrSchedule, OptimizerSpec};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Csv { path: PathBuf, label_column: String, num_classes: usize },
    Blobs { n: usize, dim: usize, classes: usize, separation: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    /// Class-balanced sample of this many examples, drawn before splitting.
    #[serde(default)]
    pub subsample: Option<usize>,
    /// Class-balanced sample of the training split only, drawn after splitting.
    #[serde(default)]
    pub train_subsample: Option<usize>,
    pub split: SplitSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    #[default]
    Relu,
    Elu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: HiddenActivation,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub l2_bias: bool,
}

impl NetworkConfig {
    pub fn spec(&self, input_dim: usize, classes: usize) -> Result<NetworkSpec> {
        let act = match self.activation {
            HiddenActivation::Relu => Activation::Relu,
            HiddenActivation::Elu => Activation::elu(),
        };
        let mut layers: Vec<LayerSpec> = self
            .hidden
            .iter()
            .map(|&w| LayerSpec { width: w, activation: act, dropout: self.dropout, l2: self.l2, l2_bias: self.l2_bias })
            .collect();
        layers.push(LayerSpec { l2_bias: self.l2_bias, ..LayerSpec::softmax(classes).with_l2(self.l2) });
        let spec = NetworkSpec { input_dim, layers };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupernetConfig {
    /// Branch checkpoints; defaults to the `partition-train` outputs.
    #[serde(default)]
    pub branches: Vec<PathBuf>,
    pub init: InitMode,
    #[serde(default = "default_retrain_epochs")]
    pub retrain_epochs: usize,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub l2_bias: bool,
    /// Defaults to `train.optimizer`.
    #[serde(default)]
    pub optimizer: Option<OptimizerSpec>,
    /// Seed for the random head initialisation.
    #[serde(default)]
    pub seed: u64,
}

fn default_retrain_epochs() -> usize {
    crate::trainer::DEFAULT_RETRAIN_EPOCHS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotSection {
    /// Pre-trained model; defaults to the `train` output.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub warmup_epochs: usize,
    pub n_cycles: usize,
    /// Cycle length in epochs (converted to optimizer steps)...
    #[serde(default)]
    pub cycle_epochs: Option<usize>,
    /// ...or directly in steps.
    #[serde(default)]
    pub cycle_steps: Option<usize>,
    pub lr_max: f64,
    pub lr_min: f64,
    #[serde(default = "default_cycle_shape")]
    pub shape: CycleShape,
    /// Defaults to `train.optimizer`.
    #[serde(default)]
    pub optimizer: Option<OptimizerSpec>,
}

fn default_cycle_shape() -> CycleShape {
    CycleShape::Cosine
}

impl SnapshotSection {
    pub fn schedule(&self, n_train: usize, batch_size: usize) -> Result<LrSchedule> {
        let cycle_len = match (self.cycle_epochs, self.cycle_steps) {
            (Some(e), None) => crate::optim::steps_for_epochs(e, n_train, batch_size),
            (None, Some(s)) => s,
            _ => return Err(Error::config("snapshot needs exactly one of cycle_epochs or cycle_steps")),
        };
        let s = LrSchedule::Cyclic { lr_max: self.lr_max, lr_min: self.lr_min, cycle_len, shape: self.shape };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainSection {
    #[serde(default = "default_retrain_epochs")]
    pub epochs: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_epochs_per_layer")]
    pub epochs_per_layer: usize,
}

fn default_depth() -> usize {
    3
}

fn default_epochs_per_layer() -> usize {
    3
}

impl Default for RetrainSection {
    fn default() -> Self {
        RetrainSection { epochs: default_retrain_epochs(), depth: default_depth(), epochs_per_layer: default_epochs_per_layer() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Val,
    #[default]
    Test,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default)]
    pub split: EvalSplit,
    /// Also write penultimate-layer features for every checkpoint.
    #[serde(default)]
    pub export_features: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub partition: Option<PartitionConfig>,
    #[serde(default)]
    pub supernet: Option<SupernetConfig>,
    #[serde(default)]
    pub snapshot: Option<SnapshotSection>,
    #[serde(default)]
    pub retrain: RetrainSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

/// Train, validation and test sets of one experiment.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, which: EvalSplit) -> &Dataset {
        match which {
            EvalSplit::Train => &self.train,
            EvalSplit::Val => &self.val,
            EvalSplit::Test => &self.test,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, resolves relative paths against the file's directory, and
    /// checks that every referenced input exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.check_inputs()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.split.validate()?;
        if let DataSource::Blobs { n, dim, classes, .. } = self.data.source {
            if n == 0 || dim == 0 || classes < 2 {
                return Err(Error::config("blobs need n >= 1, dim >= 1 and at least 2 classes"));
            }
        }
        if let Some(p) = &self.partition {
            if p.k == 0 {
                return Err(Error::config("partition k must be at least 1"));
            }
        }
        if let Some(s) = &self.supernet {
            s.init.validate()?;
            if let Some(o) = &s.optimizer {
                o.validate()?;
            }
        }
        if let Some(s) = &self.snapshot {
            if s.n_cycles == 0 {
                return Err(Error::config("snapshot n_cycles must be at least 1"));
            }
            if s.cycle_epochs.is_some() == s.cycle_steps.is_some() {
                return Err(Error::config("snapshot needs exactly one of cycle_epochs or cycle_steps"));
            }
            if let Some(o) = &s.optimizer {
                o.validate()?;
            }
        }
        Ok(())
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        match &mut self.data.source {
            DataSource::Idx { images, labels } => {
                fix(images);
                fix(labels);
            }
            DataSource::Csv { path, .. } => fix(path),
            DataSource::Blobs { .. } => {}
        }
        if let Some(s) = &mut self.supernet {
            s.branches.iter_mut().for_each(fix);
        }
        if let Some(s) = &mut self.snapshot {
            if let Some(c) = &mut s.checkpoint {
                fix(c);
            }
        }
    }

    fn check_inputs(&self) -> Result<()> {
        let need = |p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::Data(format!("input file {} does not exist", p.display())))
            }
        };
        match &self.data.source {
            DataSource::Idx { images, labels } => {
                need(images)?;
                need(labels)?;
            }
            DataSource::Csv { path, .. } => need(path)?,
            DataSource::Blobs { .. } => {}
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = match &self.data.source {
            DataSource::Idx { images, labels } => data::load_idx(images, labels)?,
            DataSource::Csv { path, label_column, num_classes } => data::load_csv(path, label_column, *num_classes)?,
            DataSource::Blobs { n, dim, classes, separation, seed } => data::synth_blobs(*n, *dim, *classes, *separation, *seed)?,
        };
        match self.data.subsample {
            Some(n) => data::stratified_sample(&ds, n, self.data.split.seed),
            None => Ok(ds),
        }
    }

    pub fn splits(&self) -> Result<Splits> {
        let (train, val, test) = data::split(&self.load_dataset()?, &self.data.split)?;
        let train = match self.data.train_subsample {
            Some(n) => data::stratified_sample(&train, n, self.data.split.seed)?,
            None => train,
        };
        Ok(Splits { train, val, test })
    }

    pub fn network_spec(&self, data: &Dataset) -> Result<NetworkSpec> {
        self.network.spec(data.dim(), data.num_classes)
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
