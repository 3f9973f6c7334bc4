//! Gradient-descent optimizers and learning-rate schedules.
//!
//! Update rules (g = gradient, t = step count after increment):
//!
//! * SGD with momentum μ: `v ← μv − lr·g; w ← w + v`
//! * Adagrad: `G ← G + g²; w ← w − lr·g / (√G + ε)`
//! * RMSprop: `E ← ρE + (1−ρ)g²; w ← w − lr·g / (√E + ε)`
//! * Adam: `m ← β₁m + (1−β₁)g; v ← β₂v + (1−β₂)g²;`
//!   `w ← w − lr·m̂ / (√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`
//! * Nadam (Dozat's Nesterov-accelerated Adam, constant β₁):
//!   `m̂ = β₁m/(1−β₁ᵗ⁺¹) + (1−β₁)g/(1−β₁ᵗ)`, otherwise as Adam.
//!
//! All accumulators start at zero.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Gradients, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adagrad,
    Rmsprop {
        #[serde(default = "default_rho")]
        rho: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
    },
    Nadam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
    },
}

fn default_rho() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub lr: f64,
}

impl OptimizerSpec {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerSpec { kind: OptimizerKind::Sgd { momentum }, epsilon: default_epsilon(), lr }
    }

    pub fn adagrad(lr: f64) -> Self {
        OptimizerSpec { kind: OptimizerKind::Adagrad, epsilon: default_epsilon(), lr }
    }

    pub fn rmsprop(lr: f64) -> Self {
        OptimizerSpec { kind: OptimizerKind::Rmsprop { rho: default_rho() }, epsilon: default_epsilon(), lr }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam { beta1: default_beta1(), beta2: default_beta2() },
            epsilon: default_epsilon(),
            lr,
        }
    }

    pub fn nadam(lr: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Nadam { beta1: default_beta1(), beta2: default_beta2() },
            epsilon: default_epsilon(),
            lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} = {v} outside [0, 1)")))
            }
        };
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                if !(momentum >= 0.0) {
                    return Err(Error::config(format!("momentum {momentum} is negative")));
                }
            }
            OptimizerKind::Adagrad => {}
            OptimizerKind::Rmsprop { rho } => unit("rho", rho)?,
            OptimizerKind::Adam { beta1, beta2 } | OptimizerKind::Nadam { beta1, beta2 } => {
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }

    fn slots(&self) -> usize {
        match self.kind {
            OptimizerKind::Sgd { momentum: 0.0 } => 0,
            OptimizerKind::Sgd { .. } | OptimizerKind::Adagrad | OptimizerKind::Rmsprop { .. } => 1,
            OptimizerKind::Adam { .. } | OptimizerKind::Nadam { .. } => 2,
        }
    }
}

/// Per-tensor accumulators, ordered weight then bias for each layer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    slots: Vec<Vec<Vec<f64>>>,
}

impl OptimizerState {
    pub fn new(spec: &OptimizerSpec, params: &ModelParams) -> Self {
        let n = spec.slots();
        let slots = params
            .layers
            .iter()
            .flat_map(|l| [l.weight.len(), l.bias.len()])
            .map(|len| (0..n).map(|_| vec![0.0; len]).collect())
            .collect();
        OptimizerState { t: 0, slots }
    }

    /// Accumulator `slot` of tensor `tensor` (2ℓ = weight, 2ℓ+1 = bias of layer ℓ).
    pub fn accumulator(&self, tensor: usize, slot: usize) -> Option<&[f64]> {
        self.slots.get(tensor)?.get(slot).map(Vec::as_slice)
    }
}

/// Applies one update to every layer with `trainable[ℓ]`; other layers and their
/// accumulators are left untouched. The step counter always advances.
pub fn step(
    spec: &OptimizerSpec,
    state: &mut OptimizerState,
    params: &mut ModelParams,
    grads: &Gradients,
    lr: f64,
    trainable: &[bool],
) -> Result<()> {
    if params.layers.len() != grads.layers.len() || trainable.len() != params.layers.len() {
        return Err(Error::shape(format!(
            "optimizer step over {} parameter layers, {} gradient layers, mask of {}",
            params.layers.len(),
            grads.layers.len(),
            trainable.len()
        )));
    }
    if state.slots.len() != 2 * params.layers.len() {
        return Err(Error::shape("optimizer state does not match parameters"));
    }
    for (i, (p, g)) in params.layers.iter().zip(&grads.layers).enumerate() {
        if p.weight.shape() != g.weight.shape() || p.bias.len() != g.bias.len() {
            return Err(Error::shape(format!("gradient shape mismatch at layer {i}")));
        }
        if trainable[i] && !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in layer {i}")));
        }
    }
    state.t += 1;
    let t = state.t;
    for (i, (p, g)) in params.layers.iter_mut().zip(&grads.layers).enumerate() {
        if !trainable[i] {
            continue;
        }
        update_tensor(spec, t, &mut state.slots[2 * i], p.weight.as_mut_slice(), g.weight.as_slice(), lr);
        update_tensor(spec, t, &mut state.slots[2 * i + 1], &mut p.bias, &g.bias, lr);
    }
    Ok(())
}

fn update_tensor(spec: &OptimizerSpec, t: u64, slots: &mut [Vec<f64>], w: &mut [f64], g: &[f64], lr: f64) {
    let eps = spec.epsilon;
    match spec.kind {
        OptimizerKind::Sgd { momentum } => {
            if momentum == 0.0 {
                for (w, g) in w.iter_mut().zip(g) {
                    *w -= lr * g;
                }
            } else {
                let v = &mut slots[0];
                for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                    *v = momentum * *v - lr * g;
                    *w += *v;
                }
            }
        }
        OptimizerKind::Adagrad => {
            let acc = &mut slots[0];
            for ((w, g), a) in w.iter_mut().zip(g).zip(acc.iter_mut()) {
                *a += g * g;
                *w -= lr * g / (a.sqrt() + eps);
            }
        }
        OptimizerKind::Rmsprop { rho } => {
            let acc = &mut slots[0];
            for ((w, g), a) in w.iter_mut().zip(g).zip(acc.iter_mut()) {
                *a = rho * *a + (1.0 - rho) * g * g;
                *w -= lr * g / (a.sqrt() + eps);
            }
        }
        OptimizerKind::Adam { beta1, beta2 } | OptimizerKind::Nadam { beta1, beta2 } => {
            let nesterov = matches!(spec.kind, OptimizerKind::Nadam { .. });
            let ti = t as i32;
            let c1 = 1.0 - beta1.powi(ti);
            let c1_next = 1.0 - beta1.powi(ti + 1);
            let c2 = 1.0 - beta2.powi(ti);
            let (m, v) = slots.split_at_mut(1);
            for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m[0].iter_mut()).zip(v[0].iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = if nesterov { beta1 * *m / c1_next + (1.0 - beta1) * g / c1 } else { *m / c1 };
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleShape {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Restarts at `lr_max` every `cycle_len` optimizer steps, reaching
    /// `lr_min` on the last step of each cycle.
    Cyclic {
        lr_max: f64,
        lr_min: f64,
        cycle_len: usize,
        #[serde(default = "default_shape")]
        shape: CycleShape,
    },
}

fn default_shape() -> CycleShape {
    CycleShape::Cosine
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant { lr } if !(lr > 0.0) => Err(Error::config(format!("constant lr {lr} must be positive"))),
            LrSchedule::Cyclic { lr_max, lr_min, cycle_len, .. } => {
                if !(lr_min > 0.0 && lr_max >= lr_min) {
                    return Err(Error::config(format!("cyclic lr needs lr_max >= lr_min > 0 (got {lr_max}, {lr_min})")));
                }
                if cycle_len < 2 {
                    return Err(Error::config("cycle length must be at least 2 steps"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn is_cyclic(&self) -> bool {
        matches!(self, LrSchedule::Cyclic { .. })
    }

    /// Learning rate for the given (0-based) optimizer step.
    pub fn lr_at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cyclic { lr_max, lr_min, cycle_len, shape } => {
                let len = cycle_len as u64;
                let phase = (step % len) as f64 / (len - 1) as f64;
                match shape {
                    CycleShape::Linear => lr_max - phase * (lr_max - lr_min),
                    CycleShape::Cosine => lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * phase).cos()),
                }
            }
        }
    }

    /// True when `step` is the last step of a cycle (always false for constant).
    pub fn is_cycle_end(&self, step: u64) -> bool {
        match *self {
            LrSchedule::Constant { .. } => false,
            LrSchedule::Cyclic { cycle_len, .. } => step % cycle_len as u64 == cycle_len as u64 - 1,
        }
    }
}

/// Number of optimizer steps in `epochs` epochs over `n_examples` examples.
pub fn steps_for_epochs(epochs: usize, n_examples: usize, batch_size: usize) -> usize {
    epochs * n_examples.div_ceil(batch_size.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::DenseParams;
    use crate::tensor::Matrix;

    fn scalar(w: f64) -> ModelParams {
        ModelParams { layers: vec![DenseParams { weight: Matrix::row_vector(vec![w]), bias: vec![0.0] }] }
    }

    fn one_step(spec: OptimizerSpec, w: f64, g: f64, lr: f64) -> f64 {
        let mut p = scalar(w);
        let mut st = OptimizerState::new(&spec, &p);
        let mut gr = scalar(g);
        gr.layers[0].bias[0] = 0.0;
        step(&spec, &mut st, &mut p, &gr, lr, &[true]).unwrap();
        p.layers[0].weight.get(0, 0)
    }

    #[test]
    fn sgd_plain_step() {
        assert!((one_step(OptimizerSpec::sgd(0.1, 0.0), 1.0, 2.0, 0.1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let w = one_step(OptimizerSpec::adam(0.1), 0.0, 1.0, 0.1);
        // m̂ = v̂ = 1, so w = -0.1 / (1 + 1e-8)
        assert!((w - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15, "{w}");
    }

    #[test]
    fn adagrad_first_step() {
        let w = one_step(OptimizerSpec::adagrad(0.1), 0.0, 3.0, 0.1);
        assert!((w - (-0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15, "{w}");
    }

    #[test]
    fn rmsprop_first_step() {
        // E = 0.1 * 4 = 0.4
        let w = one_step(OptimizerSpec::rmsprop(0.01), 1.0, 2.0, 0.01);
        assert!((w - (1.0 - 0.01 * 2.0 / (0.4f64.sqrt() + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn nadam_first_step() {
        // m = 0.1, m̂ = 0.9*0.1/(1-0.81) + 0.1/0.1 = 0.47368.. + 1, v̂ = 1
        let w = one_step(OptimizerSpec::nadam(0.1), 0.0, 1.0, 0.1);
        let m_hat = 0.9 * 0.1 / (1.0 - 0.81) + 1.0;
        assert!((w + 0.1 * m_hat / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
    }

    #[test]
    fn zero_gradient_changes_nothing_but_counter() {
        for spec in [
            OptimizerSpec::sgd(0.1, 0.9),
            OptimizerSpec::adagrad(0.1),
            OptimizerSpec::rmsprop(0.1),
            OptimizerSpec::adam(0.1),
            OptimizerSpec::nadam(0.1),
        ] {
            let mut p = scalar(0.5);
            let before = p.clone();
            let mut st = OptimizerState::new(&spec, &p);
            step(&spec, &mut st, &mut p, &scalar(0.0), 0.1, &[true]).unwrap();
            assert_eq!(p, before, "{spec:?}");
            assert_eq!(st.t, 1);
        }
    }

    #[test]
    fn frozen_layers_and_accumulators_untouched() {
        let spec = OptimizerSpec::adam(0.01);
        let mut p = ModelParams { layers: vec![scalar(1.0).layers[0].clone(), scalar(2.0).layers[0].clone()] };
        let before = p.clone();
        let mut st = OptimizerState::new(&spec, &p);
        let g = ModelParams { layers: vec![scalar(1.0).layers[0].clone(), scalar(1.0).layers[0].clone()] };
        step(&spec, &mut st, &mut p, &g, 0.01, &[false, true]).unwrap();
        assert_eq!(p.layers[0], before.layers[0]);
        assert_ne!(p.layers[1], before.layers[1]);
        assert!(st.accumulator(0, 0).unwrap().iter().all(|&x| x == 0.0));
        assert!(st.accumulator(2, 0).unwrap().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let spec = OptimizerSpec::sgd(0.1, 0.0);
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(&spec, &p);
        let err = step(&spec, &mut st, &mut p, &scalar(f64::NAN), 0.1, &[true]).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("layer 0")), "{err}");
    }

    #[test]
    fn cyclic_endpoints() {
        let lin = LrSchedule::Cyclic { lr_max: 0.1, lr_min: 0.01, cycle_len: 5, shape: CycleShape::Linear };
        assert_eq!(lin.lr_at(0), 0.1);
        assert!((lin.lr_at(4) - 0.01).abs() < 1e-17);
        assert_eq!(lin.lr_at(5), 0.1);
        assert!(lin.is_cycle_end(4) && !lin.is_cycle_end(5));
        let cos = LrSchedule::Cyclic { lr_max: 0.1, lr_min: 0.02, cycle_len: 5, shape: CycleShape::Cosine };
        assert!((cos.lr_at(2) - 0.06).abs() < 1e-15);
        assert!((cos.lr_at(4) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule::Cyclic { lr_max: 0.1, lr_min: 0.2, cycle_len: 5, shape: CycleShape::Linear }.validate().is_err());
        assert!(LrSchedule::Cyclic { lr_max: 0.1, lr_min: 0.01, cycle_len: 1, shape: CycleShape::Linear }.validate().is_err());
        assert!(LrSchedule::Constant { lr: 0.0 }.validate().is_err());
        assert!(OptimizerSpec { kind: OptimizerKind::Adam { beta1: 1.0, beta2: 0.9 }, epsilon: 1e-8, lr: 0.1 }.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cyclic_is_periodic(step in 0u64..1_000_000, len in 2usize..500, lo in 1e-5f64..0.1, span in 0.0f64..1.0, cos in any::<bool>()) {
                let shape = if cos { CycleShape::Cosine } else { CycleShape::Linear };
                let s = LrSchedule::Cyclic { lr_max: lo + span, lr_min: lo, cycle_len: len, shape };
                prop_assert_eq!(s.lr_at(step), s.lr_at(step + len as u64));
                let lr = s.lr_at(step);
                prop_assert!(lr >= lo - 1e-15 && lr <= lo + span + 1e-15);
            }
        }
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        // loss = (w - 3)², gradient 2(w - 3)
        for spec in [
            OptimizerSpec::sgd(0.01, 0.0),
            OptimizerSpec::sgd(0.01, 0.5),
            OptimizerSpec::adagrad(0.01),
            OptimizerSpec::rmsprop(0.001),
            OptimizerSpec::adam(0.001),
            OptimizerSpec::nadam(0.001),
        ] {
            let mut p = scalar(0.0);
            let mut st = OptimizerState::new(&spec, &p);
            let mut prev = 9.0;
            for _ in 0..50 {
                let w = p.layers[0].weight.get(0, 0);
                let mut g = scalar(2.0 * (w - 3.0));
                g.layers[0].bias[0] = 0.0;
                step(&spec, &mut st, &mut p, &g, spec.lr, &[true]).unwrap();
                let w = p.layers[0].weight.get(0, 0);
                let loss = (w - 3.0) * (w - 3.0);
                assert!(loss < prev, "{spec:?}: {loss} >= {prev}");
                prev = loss;
            }
        }
    }
}
