//! Dense feed-forward networks: specification, parameters, forward pass with
//! inverted dropout, cross-entropy, and hand-written backpropagation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{glorot_init, Matrix};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Rows per chunk when evaluating large datasets.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Elu {
        #[serde(default = "default_elu_alpha")]
        alpha: f64,
    },
    Softmax,
    Identity,
}

fn default_elu_alpha() -> f64 {
    1.0
}

impl Activation {
    pub fn elu() -> Self {
        Activation::Elu { alpha: default_elu_alpha() }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Elu { alpha } => {
                if z > 0.0 {
                    z
                } else {
                    alpha * z.exp_m1()
                }
            }
            Activation::Identity => z,
            Activation::Softmax => unreachable!("softmax is applied row-wise"),
        }
    }

    /// Derivative with respect to the pre-activation `z`, given `a = f(z)`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu { alpha } => {
                if z > 0.0 {
                    1.0
                } else {
                    a + alpha
                }
            }
            Activation::Identity => 1.0,
            Activation::Softmax => unreachable!("softmax gradient is fused with cross-entropy"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
    /// Dropout applied to this layer's output while training.
    #[serde(default)]
    pub dropout: f64,
    /// L2 coefficient on this layer's weights (loss term `l2 * ‖W‖²`).
    #[serde(default)]
    pub l2: f64,
    /// Also penalise the bias with the same coefficient.
    #[serde(default)]
    pub l2_bias: bool,
}

impl LayerSpec {
    pub fn dense(width: usize, activation: Activation) -> Self {
        LayerSpec { width, activation, dropout: 0.0, l2: 0.0, l2_bias: false }
    }

    pub fn relu(width: usize) -> Self {
        Self::dense(width, Activation::Relu)
    }

    pub fn softmax(width: usize) -> Self {
        Self::dense(width, Activation::Softmax)
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn with_l2(mut self, l2: f64) -> Self {
        self.l2 = l2;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// ReLU hidden layers of the given widths followed by a softmax head.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, dropout: f64, l2: f64) -> Self {
        let mut layers: Vec<LayerSpec> =
            hidden.iter().map(|&w| LayerSpec::relu(w).with_dropout(dropout).with_l2(l2)).collect();
        layers.push(LayerSpec::softmax(classes).with_l2(l2));
        NetworkSpec { input_dim, layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be at least 1"));
        }
        let Some(last) = self.layers.last() else {
            return Err(Error::config("network needs at least one layer"));
        };
        if last.activation != Activation::Softmax {
            return Err(Error::config("final layer must use softmax"));
        }
        if last.dropout != 0.0 {
            return Err(Error::config("final layer cannot use dropout"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.width == 0 {
                return Err(Error::config(format!("layer {i} has zero width")));
            }
            if layer.activation == Activation::Softmax && i + 1 != self.layers.len() {
                return Err(Error::config(format!("softmax only allowed on the final layer (layer {i})")));
            }
            if !(0.0..1.0).contains(&layer.dropout) {
                return Err(Error::config(format!("layer {i} dropout {} outside [0, 1)", layer.dropout)));
            }
            if !(layer.l2 >= 0.0) {
                return Err(Error::config(format!("layer {i} l2 coefficient {} is negative", layer.l2)));
            }
            if let Activation::Elu { alpha } = layer.activation {
                if !alpha.is_finite() {
                    return Err(Error::config(format!("layer {i} elu alpha is not finite")));
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.width)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Input width of layer `i`.
    pub fn fan_in(&self, i: usize) -> usize {
        if i == 0 {
            self.input_dim
        } else {
            self.layers[i - 1].width
        }
    }

    /// Width of the representation feeding the softmax head.
    pub fn penultimate_width(&self) -> usize {
        self.fan_in(self.layers.len() - 1)
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.width).collect()
    }

    pub fn param_count(&self) -> usize {
        (0..self.layers.len()).map(|i| (self.fan_in(i) + 1) * self.layers[i].width).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    /// `fan_in x width`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseParams {
    pub fn zeros(fan_in: usize, width: usize) -> Self {
        DenseParams { weight: Matrix::zeros(fan_in, width), bias: vec![0.0; width] }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weight.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<DenseParams>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &NetworkSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layers = (0..spec.layers.len())
            .map(|i| {
                Ok(DenseParams {
                    weight: glorot_init(rng, spec.fan_in(i), spec.layers[i].width)?,
                    bias: vec![0.0; spec.layers[i].width],
                })
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams { layers })
    }

    pub fn zeros_like(spec: &NetworkSpec) -> Self {
        ModelParams {
            layers: (0..spec.layers.len()).map(|i| DenseParams::zeros(spec.fan_in(i), spec.layers[i].width)).collect(),
        }
    }

    /// Checks that parameter shapes chain as `spec` requires.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::shape(format!(
                "{} parameter layers for a {}-layer network",
                self.layers.len(),
                spec.layers.len()
            )));
        }
        for (i, p) in self.layers.iter().enumerate() {
            let want = (spec.fan_in(i), spec.layers[i].width);
            if p.shape() != want || p.bias.len() != want.1 {
                return Err(Error::shape(format!(
                    "layer {i}: weight {}x{} / bias {} but spec needs {}x{}",
                    p.weight.rows(),
                    p.weight.cols(),
                    p.bias.len(),
                    want.0,
                    want.1
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseParams::is_finite)
    }
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub pre: Matrix,
    /// Output after activation and (in train mode) the dropout mask.
    pub post: Matrix,
    /// Inverted-dropout multipliers (0 or 1/(1-rate)); `None` when no mask was drawn.
    pub mask: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub input: Matrix,
    pub layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn probs(&self) -> &Matrix {
        &self.layers.last().expect("non-empty network").post
    }

    /// Activations feeding the softmax head (the input itself for a single-layer net).
    pub fn penultimate(&self) -> &Matrix {
        match self.layers.len() {
            0 | 1 => &self.input,
            n => &self.layers[n - 2].post,
        }
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax(logits: &Matrix) -> Result<Matrix> {
    if logits.is_empty() {
        return Err(Error::shape("softmax of an empty matrix"));
    }
    let mut out = logits.clone();
    softmax_inplace(&mut out);
    Ok(out)
}

fn softmax_inplace(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::data(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::data(format!("label {l} at index {i} is outside [0, {classes})")));
    }
    Ok(())
}

/// `-ln p(true class)` for each row, with `p` clamped to `[PROB_FLOOR, 1]`.
pub fn per_example_cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(labels, probs.rows(), probs.cols())?;
    Ok(labels.iter().enumerate().map(|(i, &l)| -probs.get(i, l).clamp(PROB_FLOOR, 1.0).ln()).collect())
}

/// Mean categorical cross-entropy (no regularisation term).
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if probs.rows() == 0 {
        return Err(Error::data("cross-entropy of an empty batch"));
    }
    let losses = per_example_cross_entropy(probs, labels)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// `Σ_ℓ l2_ℓ · (‖W_ℓ‖² [+ ‖b_ℓ‖²])`.
pub fn l2_penalty(params: &ModelParams, spec: &NetworkSpec) -> f64 {
    let mut total = 0.0;
    for (p, l) in params.layers.iter().zip(&spec.layers) {
        if l.l2 == 0.0 {
            continue;
        }
        let mut sq: f64 = p.weight.as_slice().iter().map(|w| w * w).sum();
        if l.l2_bias {
            sq += p.bias.iter().map(|b| b * b).sum::<f64>();
        }
        total += l.l2 * sq;
    }
    total
}

pub fn forward(params: &ModelParams, spec: &NetworkSpec, batch: &Matrix, mode: Mode, rng: &mut Rng) -> Result<ForwardCache> {
    if batch.cols() != spec.input_dim {
        return Err(Error::shape(format!(
            "batch has {} features, network expects {}",
            batch.cols(),
            spec.input_dim
        )));
    }
    params.check(spec)?;
    let mut layers: Vec<LayerCache> = Vec::with_capacity(spec.layers.len());
    for (i, (p, l)) in params.layers.iter().zip(&spec.layers).enumerate() {
        let input = if i == 0 { batch } else { &layers[i - 1].post };
        let mut pre = input.matmul(&p.weight)?;
        pre.add_row_broadcast(&p.bias)?;
        let mut post = pre.clone();
        if l.activation == Activation::Softmax {
            softmax_inplace(&mut post);
        } else {
            let act = l.activation;
            post.map_inplace(|z| act.apply(z));
        }
        let mut mask = None;
        if mode == Mode::Train && l.dropout > 0.0 {
            let keep = 1.0 - l.dropout;
            let scale = 1.0 / keep;
            let mut m = Matrix::zeros(post.rows(), post.cols());
            for (mv, a) in m.as_mut_slice().iter_mut().zip(post.as_mut_slice()) {
                if rng.uniform() < keep {
                    *mv = scale;
                    *a *= scale;
                } else {
                    *a = 0.0;
                }
            }
            mask = Some(m);
        }
        layers.push(LayerCache { pre, post, mask });
    }
    Ok(ForwardCache { input: batch.clone(), layers })
}

/// Gradient of `cross_entropy + l2_penalty` for every layer with
/// `trainable[ℓ] == true`; other layers get zeros. Backpropagation stops at the
/// lowest trainable layer.
pub fn backward(
    cache: &ForwardCache,
    params: &ModelParams,
    spec: &NetworkSpec,
    labels: &[usize],
    trainable: &[bool],
) -> Result<Gradients> {
    params.check(spec)?;
    let n_layers = spec.layers.len();
    if cache.layers.len() != n_layers {
        return Err(Error::shape(format!("cache has {} layers, network has {n_layers}", cache.layers.len())));
    }
    if trainable.len() != n_layers {
        return Err(Error::shape(format!("trainable mask of length {} for {n_layers} layers", trainable.len())));
    }
    for (i, (c, p)) in cache.layers.iter().zip(&params.layers).enumerate() {
        let rows = cache.input.rows();
        if c.pre.shape() != (rows, p.weight.cols()) {
            return Err(Error::shape(format!("cache layer {i} does not match parameters")));
        }
    }
    let probs = cache.probs();
    let batch = probs.rows();
    check_labels(labels, batch, probs.cols())?;

    let Some(lowest) = trainable.iter().position(|&t| t) else {
        return Ok(ModelParams::zeros_like(spec));
    };
    let mut computed: Vec<Option<DenseParams>> = vec![None; n_layers];

    // softmax + cross-entropy: dz = (p - onehot) / batch
    let mut dz = probs.clone();
    for (r, &l) in labels.iter().enumerate() {
        let v = dz.get(r, l);
        dz.set(r, l, v - 1.0);
    }
    dz.scale(1.0 / batch as f64);

    for i in (lowest..n_layers).rev() {
        let p = &params.layers[i];
        let l = &spec.layers[i];
        if trainable[i] {
            let input = if i == 0 { &cache.input } else { &cache.layers[i - 1].post };
            let mut dw = input.t_matmul(&dz)?;
            let mut db = dz.column_sums();
            if l.l2 != 0.0 {
                let c = 2.0 * l.l2;
                for (g, w) in dw.as_mut_slice().iter_mut().zip(p.weight.as_slice()) {
                    *g += c * w;
                }
                if l.l2_bias {
                    for (g, b) in db.iter_mut().zip(&p.bias) {
                        *g += c * b;
                    }
                }
            }
            computed[i] = Some(DenseParams { weight: dw, bias: db });
        }
        if i > lowest {
            let below = &cache.layers[i - 1];
            let act = spec.layers[i - 1].activation;
            let mut da = dz.matmul_t(&p.weight)?;
            if let Some(mask) = &below.mask {
                for (g, m) in da.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    *g *= m;
                }
            }
            // recover the pre-dropout activation for the derivative
            for ((g, &z), &a) in da.as_mut_slice().iter_mut().zip(below.pre.as_slice()).zip(below.post.as_slice()) {
                let a_raw = if below.mask.is_some() { act.apply(z) } else { a };
                *g *= act.derivative(z, a_raw);
            }
            dz = da;
        }
    }
    let layers = computed
        .into_iter()
        .enumerate()
        .map(|(i, g)| g.unwrap_or_else(|| DenseParams::zeros(spec.fan_in(i), spec.layers[i].width)))
        .collect();
    Ok(ModelParams { layers })
}

/// Eval-mode class probabilities, computed in row chunks.
pub fn predict_proba(params: &ModelParams, spec: &NetworkSpec, x: &Matrix) -> Result<Matrix> {
    map_chunks(x, |chunk| {
        let cache = forward(params, spec, chunk, Mode::Eval, &mut Rng::new(0))?;
        Ok(cache.layers.into_iter().last().expect("non-empty").post)
    })
}

/// Eval-mode activations feeding the softmax head.
pub fn penultimate_features(params: &ModelParams, spec: &NetworkSpec, x: &Matrix) -> Result<Matrix> {
    map_chunks(x, |chunk| {
        let mut cache = forward(params, spec, chunk, Mode::Eval, &mut Rng::new(0))?;
        let n = cache.layers.len();
        Ok(if n < 2 { cache.input } else { cache.layers.swap_remove(n - 2).post })
    })
}

/// Eval-mode output of the hidden stack `body` (every layer but the head),
/// i.e. the representation that feeds the softmax head.
pub fn body_features(spec: &NetworkSpec, body: &[DenseParams], x: &Matrix) -> Result<Matrix> {
    let hidden = &spec.layers[..spec.layers.len().saturating_sub(1)];
    if body.len() != hidden.len() {
        return Err(Error::shape(format!("{} body layers for {} hidden layers", body.len(), hidden.len())));
    }
    if x.cols() != spec.input_dim {
        return Err(Error::shape(format!("batch has {} features, network expects {}", x.cols(), spec.input_dim)));
    }
    for (i, (p, l)) in body.iter().zip(hidden).enumerate() {
        if p.shape() != (spec.fan_in(i), l.width) || p.bias.len() != l.width {
            return Err(Error::shape(format!("body layer {i} does not match the spec")));
        }
    }
    map_chunks(x, |chunk| {
        let mut a = chunk.clone();
        for (p, l) in body.iter().zip(hidden) {
            let mut z = a.matmul(&p.weight)?;
            z.add_row_broadcast(&p.bias)?;
            let act = l.activation;
            z.map_inplace(|v| act.apply(v));
            a = z;
        }
        Ok(a)
    })
}

pub(crate) fn map_chunks(x: &Matrix, mut f: impl FnMut(&Matrix) -> Result<Matrix>) -> Result<Matrix> {
    if x.rows() <= EVAL_CHUNK {
        return f(x);
    }
    let mut parts = Vec::new();
    for start in (0..x.rows()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(x.rows())).collect();
        parts.push(f(&x.select_rows(&idx))?);
    }
    Matrix::vstack(&parts.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_layer(weight: Matrix, bias: Vec<f64>) -> (NetworkSpec, ModelParams) {
        let spec = NetworkSpec { input_dim: weight.rows(), layers: vec![LayerSpec::softmax(weight.cols())] };
        (spec, ModelParams { layers: vec![DenseParams { weight, bias }] })
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&Matrix::row_vector(vec![0.0, 0.0, 0.0])).unwrap();
        for &v in p.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&Matrix::row_vector(vec![1.0, 1.0])).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
        let p = softmax(&Matrix::row_vector(vec![1000.0, 0.0])).unwrap();
        assert!(p.is_finite());
        assert!((p.get(0, 0) - 1.0).abs() < 1e-15 && p.get(0, 1) < 1e-300);
        assert!(softmax(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let p = Matrix::row_vector(vec![1.0, 0.0]);
        assert_eq!(cross_entropy(&p, &[0]).unwrap(), 0.0);
        let p = Matrix::row_vector(vec![0.5, 0.5]);
        assert!((cross_entropy(&p, &[0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let p = Matrix::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.25, 0.25, 0.5]]).unwrap();
        let want = (-(0.7f64.ln()) - 0.8f64.ln() - 0.25f64.ln()) / 3.0;
        assert!((cross_entropy(&p, &[0, 1, 0]).unwrap() - want).abs() < 1e-15);
        assert!(matches!(cross_entropy(&p, &[0, 3, 0]), Err(Error::Data(_))));
    }

    #[test]
    fn zero_network_is_uniform() {
        let (spec, params) = one_layer(Matrix::zeros(3, 4), vec![0.0; 4]);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        let cache = forward(&params, &spec, &x, Mode::Eval, &mut Rng::new(0)).unwrap();
        assert_eq!(cache.probs().as_slice(), &[0.25; 4]);
    }

    #[test]
    fn hand_computed_two_layer_forward() {
        // 2 -> 2 (relu) -> 2 (softmax)
        let spec = NetworkSpec { input_dim: 2, layers: vec![LayerSpec::relu(2), LayerSpec::softmax(2)] };
        let params = ModelParams {
            layers: vec![
                DenseParams { weight: Matrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap(), bias: vec![0.1, -0.2] },
                DenseParams { weight: Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 1.0]]).unwrap(), bias: vec![0.0, 0.3] },
            ],
        };
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        // row 0: z1 = [1+1+0.1, -1+4-0.2] = [2.1, 2.8]; z2 = [2.1-2.8, 2.8+0.3] = [-0.7, 3.1]
        // row 1: z1 = [-1+0.25+0.1, 1+1-0.2] = [-0.65, 1.8] -> relu [0, 1.8]; z2 = [-1.8, 2.1]
        let sm = |a: f64, b: f64| {
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            [ea / (ea + eb), eb / (ea + eb)]
        };
        let want: Vec<f64> = [sm(-0.7, 3.1), sm(-1.8, 2.1)].concat();
        let cache = forward(&params, &spec, &x, Mode::Eval, &mut Rng::new(0)).unwrap();
        for (g, w) in cache.probs().as_slice().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
        let again = forward(&params, &spec, &x, Mode::Eval, &mut Rng::new(99)).unwrap();
        assert_eq!(cache, again);
    }

    #[test]
    fn single_layer_uniform_gradient() {
        let (spec, params) = one_layer(Matrix::zeros(2, 4), vec![0.0; 4]);
        let x = Matrix::row_vector(vec![1.0, 0.0]);
        let cache = forward(&params, &spec, &x, Mode::Eval, &mut Rng::new(0)).unwrap();
        let g = backward(&cache, &params, &spec, &[0], &[true]).unwrap();
        // dW = xᵀ dz, so row 0 of dW is dz itself
        assert_eq!(g.layers[0].bias, vec![0.25 - 1.0, 0.25, 0.25, 0.25]);
        assert_eq!(g.layers[0].weight.row(0), &[0.25 - 1.0, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn frozen_layers_get_zero_gradients() {
        let spec = NetworkSpec::mlp(4, &[5, 3], 3, 0.0, 0.01);
        let params = ModelParams::init(&spec, &mut Rng::new(1)).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![1.0, -1.0, 0.5, 0.0]]).unwrap();
        let cache = forward(&params, &spec, &x, Mode::Train, &mut Rng::new(2)).unwrap();
        let g = backward(&cache, &params, &spec, &[0, 2], &[false, false, false]).unwrap();
        assert_eq!(g, ModelParams::zeros_like(&spec));
        let g = backward(&cache, &params, &spec, &[0, 2], &[false, true, false]).unwrap();
        assert_eq!(g.layers[0], DenseParams::zeros(4, 5));
        assert_eq!(g.layers[2], DenseParams::zeros(3, 3));
        assert_ne!(g.layers[1], DenseParams::zeros(5, 3));
    }

    #[test]
    fn spec_validation() {
        let mut spec = NetworkSpec::mlp(4, &[5], 3, 0.2, 0.0);
        assert!(spec.validate().is_ok());
        spec.layers[1].dropout = 0.1;
        assert!(spec.validate().is_err());
        let spec = NetworkSpec { input_dim: 4, layers: vec![LayerSpec::softmax(3), LayerSpec::softmax(3)] };
        assert!(spec.validate().is_err());
        let spec = NetworkSpec { input_dim: 4, layers: vec![LayerSpec::relu(3)] };
        assert!(spec.validate().is_err());
        let spec = NetworkSpec { input_dim: 4, layers: vec![] };
        assert!(spec.validate().is_err());
        let mut spec = NetworkSpec::mlp(4, &[5], 3, 0.0, 0.0);
        spec.layers[0].l2 = -1.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn eval_mode_skips_dropout() {
        let spec = NetworkSpec::mlp(3, &[50], 2, 0.5, 0.0);
        let params = ModelParams::init(&spec, &mut Rng::new(3)).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, -0.2, 1.0]]).unwrap();
        let cache = forward(&params, &spec, &x, Mode::Eval, &mut Rng::new(4)).unwrap();
        assert!(cache.layers[0].mask.is_none());
        let mut relu = cache.layers[0].pre.clone();
        relu.map_inplace(|z| z.max(0.0));
        assert_eq!(cache.layers[0].post, relu);
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let spec = NetworkSpec::mlp(2, &[8], 2, 0.3, 0.0);
        let params = ModelParams::init(&spec, &mut Rng::new(5)).unwrap();
        let x = Matrix::row_vector(vec![0.7, 0.4]);
        let clean = forward(&params, &spec, &x, Mode::Eval, &mut Rng::new(0)).unwrap().layers[0].post.clone();
        let mut rng = Rng::new(6);
        let mut sum = [0.0; 8];
        let trials = 10_000;
        for _ in 0..trials {
            let c = forward(&params, &spec, &x, Mode::Train, &mut rng).unwrap();
            for (s, v) in sum.iter_mut().zip(c.layers[0].post.as_slice()) {
                *s += v;
            }
        }
        for (s, &c) in sum.iter().zip(clean.as_slice()) {
            let mean = s / trials as f64;
            if c > 0.0 {
                assert!((mean - c).abs() <= 0.02 * c, "{mean} vs {c}");
            } else {
                assert_eq!(mean, 0.0);
            }
        }
    }

    #[test]
    fn penultimate_of_single_layer_is_input() {
        let (spec, params) = one_layer(Matrix::zeros(3, 2), vec![0.0; 2]);
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(penultimate_features(&params, &spec, &x).unwrap(), x);
    }
}
