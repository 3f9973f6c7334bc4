//! Partitioning a dense network into narrower branches, merging trained
//! branches into a SuperNet with a shared softmax head, and voting baselines.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{body_features, softmax, Activation, DenseParams, LayerSpec, ModelParams, NetworkSpec};
use crate::rng::Rng;
use crate::tensor::{argmax, glorot_init, Matrix};
use crate::trainer::{self, EvalReport, MetricsRecord, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub root: NetworkSpec,
    pub k: usize,
    pub branch_specs: Vec<NetworkSpec>,
}

impl PartitionPlan {
    pub fn branch_param_total(&self) -> usize {
        self.branch_specs.iter().map(NetworkSpec::param_count).sum()
    }
}

/// Splits every hidden layer of `root` into `k` equal slices; each branch
/// keeps the root's activations, dropout and L2 and gets its own head.
pub fn partition(root: &NetworkSpec, k: usize) -> Result<PartitionPlan> {
    root.validate()?;
    if k == 0 {
        return Err(Error::config("partition count k must be at least 1"));
    }
    let n = root.layers.len();
    let mut layers = Vec::with_capacity(n);
    for (i, l) in root.layers.iter().enumerate() {
        if i + 1 == n {
            layers.push(l.clone());
        } else if l.width % k != 0 {
            return Err(Error::config(format!("hidden layer {i} has width {} which is not divisible by k={k}", l.width)));
        } else {
            layers.push(LayerSpec { width: l.width / k, ..l.clone() });
        }
    }
    let branch = NetworkSpec { input_dim: root.input_dim, layers };
    Ok(PartitionPlan { root: root.clone(), k, branch_specs: vec![branch; k] })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitMode {
    /// Glorot-uniform merged weights, zero bias.
    Random,
    /// Stacked branch head weights, averaged head biases.
    Copy,
    /// As `Copy`, with the stacked weights divided by `divisor`.
    CopyScaled {
        divisor: f64,
        /// Divide the averaged bias as well.
        #[serde(default)]
        scale_bias: bool,
    },
}

impl InitMode {
    pub fn scaled(divisor: f64) -> Self {
        InitMode::CopyScaled { divisor, scale_bias: false }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            InitMode::CopyScaled { divisor, .. } if !(divisor > 0.0 && divisor.is_finite()) => {
                Err(Error::config(format!("downscale divisor must be positive, got {divisor}")))
            }
            _ => Ok(()),
        }
    }
}

/// The hidden stack of one trained branch, without its softmax head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub spec: NetworkSpec,
    pub body: Vec<DenseParams>,
}

impl Branch {
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        body_features(&self.spec, &self.body, x)
    }

    fn body_param_count(&self) -> usize {
        self.body.iter().map(|p| p.weight.len() + p.bias.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperNetModel {
    pub branches: Vec<Branch>,
    /// `(Σ penultimate widths) x classes`.
    pub head: DenseParams,
    pub init_mode: InitMode,
}

impl SuperNetModel {
    pub fn num_classes(&self) -> usize {
        self.head.bias.len()
    }

    pub fn input_dim(&self) -> usize {
        self.branches[0].spec.input_dim
    }

    pub fn merged_width(&self) -> usize {
        self.branches.iter().map(|b| b.spec.penultimate_width()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(Branch::body_param_count).sum::<usize>() + self.head.weight.len() + self.head.bias.len()
    }

    pub fn check(&self) -> Result<()> {
        let Some(first) = self.branches.first() else {
            return Err(Error::shape("SuperNet has no branches"));
        };
        for (i, b) in self.branches.iter().enumerate() {
            if b.spec.input_dim != first.spec.input_dim {
                return Err(Error::shape(format!("branch {i} input dim {} differs from {}", b.spec.input_dim, first.spec.input_dim)));
            }
            if b.body.len() + 1 != b.spec.layers.len() {
                return Err(Error::shape(format!("branch {i} body has {} layers", b.body.len())));
            }
        }
        let want = (self.merged_width(), self.head.bias.len());
        if self.head.shape() != want {
            return Err(Error::shape(format!(
                "merged head is {}x{} but branches need {}x{}",
                self.head.weight.rows(),
                self.head.weight.cols(),
                want.0,
                want.1
            )));
        }
        Ok(())
    }

    /// Concatenated eval-mode branch features, in branch order.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        let parts = self.branches.iter().map(|b| b.features(x)).collect::<Result<Vec<_>>>()?;
        Matrix::hstack(&parts.iter().collect::<Vec<_>>())
    }

    pub fn head_proba(&self, features: &Matrix) -> Result<Matrix> {
        let mut z = features.matmul(&self.head.weight)?;
        z.add_row_broadcast(&self.head.bias)?;
        softmax(&z)
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        self.check()?;
        self.head_proba(&self.features(x)?)
    }

    pub fn evaluate(&self, dataset: &Dataset) -> Result<EvalReport> {
        dataset.require_non_empty("evaluation")?;
        EvalReport::from_probabilities(self.predict_proba(&dataset.features)?, &dataset.labels)
    }

    fn head_spec(&self, l2: f64, l2_bias: bool) -> NetworkSpec {
        NetworkSpec {
            input_dim: self.merged_width(),
            layers: vec![LayerSpec { width: self.num_classes(), activation: Activation::Softmax, dropout: 0.0, l2, l2_bias }],
        }
    }
}

fn check_branches(branches: &[(NetworkSpec, ModelParams)]) -> Result<()> {
    let Some((first, _)) = branches.first() else {
        return Err(Error::shape("a SuperNet needs at least one branch"));
    };
    for (i, (spec, params)) in branches.iter().enumerate() {
        spec.validate()?;
        params.check(spec).map_err(|e| Error::shape(format!("branch {i}: {e}")))?;
        if spec.input_dim != first.input_dim || spec.num_classes() != first.num_classes() {
            return Err(Error::shape(format!(
                "branch {i} maps {} -> {} but branch 0 maps {} -> {}",
                spec.input_dim,
                spec.num_classes(),
                first.input_dim,
                first.num_classes()
            )));
        }
    }
    Ok(())
}

/// Copies each branch's hidden layers and merges the heads per `mode`.
pub fn build_supernet(branches: &[(NetworkSpec, ModelParams)], mode: InitMode, rng: &mut Rng) -> Result<SuperNetModel> {
    check_branches(branches)?;
    mode.validate()?;
    let classes = branches[0].0.num_classes();
    let mut bodies = Vec::with_capacity(branches.len());
    let mut heads = Vec::with_capacity(branches.len());
    for (spec, params) in branches {
        let (head, body) = params.layers.split_last().expect("validated non-empty");
        bodies.push(Branch { spec: spec.clone(), body: body.to_vec() });
        heads.push(head);
    }
    let rows: usize = bodies.iter().map(|b| b.spec.penultimate_width()).sum();
    let head = match mode {
        InitMode::Random => DenseParams { weight: glorot_init(rng, rows, classes)?, bias: vec![0.0; classes] },
        InitMode::Copy | InitMode::CopyScaled { .. } => {
            let mut weight = Matrix::vstack(&heads.iter().map(|h| &h.weight).collect::<Vec<_>>())?;
            let k = heads.len() as f64;
            let mut bias: Vec<f64> = (0..classes).map(|c| heads.iter().map(|h| h.bias[c]).sum::<f64>() / k).collect();
            if let InitMode::CopyScaled { divisor, scale_bias } = mode {
                weight.map_inplace(|w| w / divisor);
                if scale_bias {
                    bias.iter_mut().for_each(|b| *b /= divisor);
                }
            }
            DenseParams { weight, bias }
        }
    };
    Ok(SuperNetModel { branches: bodies, head, init_mode: mode })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub train: TrainConfig,
    /// L2 coefficient on the merged weights.
    #[serde(default)]
    pub l2: f64,
    /// Apply the L2 term to the merged bias too.
    #[serde(default)]
    pub l2_bias: bool,
}

/// Trains only the merged head with a fresh optimizer. Branch features are
/// computed once in eval mode, so branch dropout plays no part here.
pub fn retrain_supernet(
    model: SuperNetModel,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &RetrainConfig,
) -> Result<(SuperNetModel, Vec<MetricsRecord>)> {
    model.check()?;
    if config.train.max_epochs == 0 {
        return Ok((model, Vec::new()));
    }
    train_set.require_non_empty("training")?;
    val_set.require_non_empty("validation")?;
    let lift = |d: &Dataset| -> Result<Dataset> {
        Dataset::new(model.features(&d.features)?, d.labels.clone(), d.num_classes, d.name.clone())
    };
    let (ftrain, fval) = (lift(train_set)?, lift(val_set)?);
    let spec = model.head_spec(config.l2, config.l2_bias);
    let mut tc = config.train.clone();
    tc.trainable = None;
    let outcome = trainer::train(ModelParams { layers: vec![model.head.clone()] }, &spec, &ftrain, &fval, &tc)?;
    let head = outcome.params.layers.into_iter().next().expect("one layer");
    Ok((SuperNetModel { head, ..model }, outcome.history))
}

/// Most frequent class per example; ties go to the lowest class index.
pub fn majority_vote(predictions: &[Vec<usize>]) -> Result<Vec<usize>> {
    let Some(first) = predictions.first() else {
        return Err(Error::config("majority vote needs at least one voter"));
    };
    let n = first.len();
    if let Some(i) = predictions.iter().position(|p| p.len() != n) {
        return Err(Error::shape(format!("voter {i} has {} predictions, voter 0 has {n}", predictions[i].len())));
    }
    let classes = predictions.iter().flatten().max().map_or(0, |&m| m + 1);
    let mut counts = vec![0usize; classes];
    Ok((0..n)
        .map(|i| {
            counts.iter_mut().for_each(|c| *c = 0);
            for p in predictions {
                counts[p[i]] += 1;
            }
            let mut best = 0;
            for (c, &v) in counts.iter().enumerate() {
                if v > counts[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Row-wise argmax of the summed probability matrices.
pub fn softmax_vote(probabilities: &[Matrix]) -> Result<Vec<usize>> {
    let Some(first) = probabilities.first() else {
        return Err(Error::config("softmax vote needs at least one voter"));
    };
    let mut sum = first.clone();
    for (i, p) in probabilities.iter().enumerate().skip(1) {
        if p.shape() != sum.shape() {
            return Err(Error::shape(format!(
                "voter {i} is {}x{}, voter 0 is {}x{}",
                p.rows(),
                p.cols(),
                sum.rows(),
                sum.cols()
            )));
        }
        sum = sum.add(p)?;
    }
    Ok(sum.iter_rows().map(argmax).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub branches: Vec<EvalReport>,
    pub supernet: EvalReport,
    pub majority_accuracy: f64,
    pub softmax_vote_accuracy: f64,
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Scores every branch, both voting baselines and the SuperNet from a single
/// forward pass through each branch's hidden stack.
pub fn compare(model: &SuperNetModel, branches: &[(NetworkSpec, ModelParams)], data: &Dataset) -> Result<Comparison> {
    model.check()?;
    check_branches(branches)?;
    data.require_non_empty("evaluation")?;
    if branches.len() != model.branches.len() {
        return Err(Error::shape(format!("{} branches given for a {}-branch SuperNet", branches.len(), model.branches.len())));
    }
    let mut features = Vec::with_capacity(branches.len());
    let mut reports = Vec::with_capacity(branches.len());
    for (i, ((spec, params), b)) in branches.iter().zip(&model.branches).enumerate() {
        let (head, body) = params.layers.split_last().expect("validated non-empty");
        if *spec != b.spec || body != b.body.as_slice() {
            return Err(Error::shape(format!("branch {i} hidden layers differ from the SuperNet's copy")));
        }
        let f = b.features(&data.features)?;
        let mut z = f.matmul(&head.weight)?;
        z.add_row_broadcast(&head.bias)?;
        reports.push(EvalReport::from_probabilities(softmax(&z)?, &data.labels)?);
        features.push(f);
    }
    let merged = Matrix::hstack(&features.iter().collect::<Vec<_>>())?;
    let supernet = EvalReport::from_probabilities(model.head_proba(&merged)?, &data.labels)?;
    let majority = majority_vote(&reports.iter().map(|r| r.predictions.clone()).collect::<Vec<_>>())?;
    let soft = softmax_vote(&reports.iter().map(|r| r.probabilities.clone()).collect::<Vec<_>>())?;
    Ok(Comparison {
        majority_accuracy: accuracy(&majority, &data.labels),
        softmax_vote_accuracy: accuracy(&soft, &data.labels),
        branches: reports,
        supernet,
    })
}
