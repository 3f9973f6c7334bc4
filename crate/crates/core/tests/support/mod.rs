//! Property checks shared by the property tests and the acceptance suite.
//! Each check returns `Err` with a description of the first violation.
#![allow(dead_code)]

use snet::analysis::{loss_stats, percentile, similarity_matrix};
use snet::data::{idx_dataset, Dataset};
use snet::ensemble::{build_supernet, majority_vote, softmax_vote, InitMode};
use snet::network::{backward, cross_entropy, forward, l2_penalty, predict_proba, softmax, Activation, Mode, ModelParams, NetworkSpec};
use snet::optim::{step, CycleShape, LrSchedule, OptimizerSpec, OptimizerState};
use snet::persist::{decode, encode, Model};
use snet::{Matrix, Rng};

pub type Check = Result<(), String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| scale * rng.normal()).collect()).unwrap()
}

pub fn random_labels(n: usize, classes: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| rng.below(classes as u64) as usize).collect()
}

/// Random probability rows (softmax of Gaussian logits).
pub fn random_probs(rows: usize, classes: usize, rng: &mut Rng) -> Matrix {
    softmax(&random_matrix(rows, classes, 2.0, rng)).unwrap()
}

pub fn gradient_spec(input: usize, hidden: &[usize], classes: usize, elu: bool, dropout: f64, l2: f64) -> NetworkSpec {
    let mut spec = NetworkSpec::mlp(input, hidden, classes, dropout, l2);
    if elu {
        let n = spec.layers.len();
        for l in &mut spec.layers[..n - 1] {
            l.activation = Activation::elu();
        }
    }
    spec
}

fn objective(params: &ModelParams, spec: &NetworkSpec, x: &Matrix, y: &[usize], mask_seed: u64) -> f64 {
    let cache = forward(params, spec, x, Mode::Train, &mut Rng::new(mask_seed)).unwrap();
    cross_entropy(cache.probs(), y).unwrap() + l2_penalty(params, spec)
}

/// Largest per-tensor relative error `|g - n| / (|g| + |n|)` (Euclidean
/// norms) between backprop and central differences with step `h`. Dropout
/// masks are held fixed by reseeding every forward pass. Biases are drawn
/// away from zero so no ReLU input sits exactly on the kink.
pub fn gradient_rel_error(spec: &NetworkSpec, seed: u64, batch: usize, h: f64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut params = ModelParams::init(spec, &mut rng).unwrap();
    for layer in &mut params.layers {
        layer.bias.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
    }
    let x = random_matrix(batch, spec.input_dim, 1.0, &mut rng);
    let y = random_labels(batch, spec.num_classes(), &mut rng);
    let mask_seed = seed ^ 0x5eed;
    let cache = forward(&params, spec, &x, Mode::Train, &mut Rng::new(mask_seed)).unwrap();
    let grads = backward(&cache, &params, spec, &y, &vec![true; spec.num_layers()]).unwrap();

    let mut worst: f64 = 0.0;
    for l in 0..spec.num_layers() {
        for tensor in 0..2 {
            let analytic = if tensor == 0 { grads.layers[l].weight.as_slice().to_vec() } else { grads.layers[l].bias.clone() };
            let mut numeric = vec![0.0; analytic.len()];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let mut p = params.clone();
                let mut m = params.clone();
                if tensor == 0 {
                    p.layers[l].weight.as_mut_slice()[i] += h;
                    m.layers[l].weight.as_mut_slice()[i] -= h;
                } else {
                    p.layers[l].bias[i] += h;
                    m.layers[l].bias[i] -= h;
                }
                *slot = (objective(&p, spec, &x, &y, mask_seed) - objective(&m, spec, &x, &y, mask_seed)) / (2.0 * h);
            }
            let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let norm_a = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
            let norm_n = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
            if norm_a + norm_n > 0.0 {
                worst = worst.max(diff / (norm_a + norm_n));
            }
        }
    }
    worst
}

pub fn check_softmax_shift(seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let logits = random_matrix(6, 5, 3.0, &mut rng);
    let base = softmax(&logits).unwrap();
    for shift in [-1000.0, -3.5, 0.25, 700.0] {
        let shifted = softmax(&logits.map(|v| v + shift)).unwrap();
        let d = base.max_abs_diff(&shifted);
        ensure(d <= 1e-12, || format!("softmax shift {shift} moved probabilities by {d}"))?;
    }
    let huge = Matrix::from_rows(&[vec![1e308, 0.0, -1e308]]).unwrap();
    let p = softmax(&huge).unwrap();
    ensure(p.is_finite(), || "softmax overflowed on extreme logits".into())?;
    for row in base.iter_rows() {
        let s: f64 = row.iter().sum();
        ensure((s - 1.0).abs() <= 1e-12, || format!("softmax row sums to {s}"))?;
    }
    Ok(())
}

/// K identical branches merged with the weights divided by K reproduce the
/// branch's probabilities; a single branch in copy mode is the branch itself.
pub fn copy_identity_error(seed: u64, k: usize) -> f64 {
    let mut rng = Rng::new(seed);
    let spec = NetworkSpec::mlp(7, &[6, 5], 4, 0.2, 0.0);
    let params = ModelParams::init(&spec, &mut rng).unwrap();
    let x = random_matrix(9, 7, 1.0, &mut rng);
    let expect = predict_proba(&params, &spec, &x).unwrap();
    let members = vec![(spec.clone(), params.clone()); k];
    let mode = if k == 1 { InitMode::Copy } else { InitMode::scaled(k as f64) };
    let merged = build_supernet(&members, mode, &mut rng).unwrap();
    merged.predict_proba(&x).unwrap().max_abs_diff(&expect)
}

pub fn check_voting(seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let (n, classes, k) = (40, 5, 3);
    let probs: Vec<Matrix> = (0..k).map(|_| random_probs(n, classes, &mut rng)).collect();
    let one = softmax_vote(&probs[..1]).unwrap();
    ensure(one == probs[0].argmax_rows(), || "single-voter softmax vote differs from argmax".into())?;
    let base = softmax_vote(&probs).unwrap();
    let scaled: Vec<Matrix> = probs
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.scale(3.75);
            q
        })
        .collect();
    ensure(softmax_vote(&scaled).unwrap() == base, || "softmax vote changed under a common positive scale".into())?;
    let mut reversed = probs.clone();
    reversed.reverse();
    ensure(softmax_vote(&reversed).unwrap() == base, || "softmax vote depends on voter order".into())?;

    let preds: Vec<Vec<usize>> = probs.iter().map(Matrix::argmax_rows).collect();
    let same = vec![preds[0].clone(); 4];
    ensure(majority_vote(&same).unwrap() == preds[0], || "unanimous majority vote changed a prediction".into())?;
    let mv = majority_vote(&preds).unwrap();
    for (i, &v) in mv.iter().enumerate() {
        let votes = |c: usize| preds.iter().filter(|p| p[i] == c).count();
        let best = (0..classes).map(votes).max().unwrap();
        ensure(votes(v) == best, || format!("majority vote at {i} is not a most-voted class"))?;
        ensure((0..v).all(|c| votes(c) < best), || format!("majority vote tie at {i} not broken to the lowest class"))?;
    }
    Ok(())
}

pub fn check_cyclic_lr(seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let len = 2 + rng.below(300) as usize;
    let lr_min = 1e-4 + 1e-2 * rng.uniform();
    let lr_max = lr_min + 0.1 * rng.uniform();
    for shape in [CycleShape::Linear, CycleShape::Cosine] {
        let s = LrSchedule::Cyclic { lr_max, lr_min, cycle_len: len, shape };
        for c in 0..4u64 {
            let start = c * len as u64;
            let end = start + len as u64 - 1;
            ensure(s.lr_at(start) == lr_max, || format!("cycle {c} starts at {} not {lr_max}", s.lr_at(start)))?;
            ensure((s.lr_at(end) - lr_min).abs() <= 1e-15, || format!("cycle {c} ends at {} not {lr_min}", s.lr_at(end)))?;
            ensure(s.is_cycle_end(end) && !s.is_cycle_end(start), || format!("cycle {c} end flag misplaced"))?;
        }
        let mut prev = f64::INFINITY;
        for t in 0..len as u64 {
            let lr = s.lr_at(t);
            ensure(lr <= prev && lr >= lr_min - 1e-15 && lr <= lr_max, || format!("lr {lr} at step {t} breaks monotone decay"))?;
            ensure(s.lr_at(t + 7 * len as u64) == lr, || format!("lr at step {t} is not periodic"))?;
            prev = lr;
        }
    }
    Ok(())
}

fn scalar_params(w: f64) -> ModelParams {
    let spec = NetworkSpec::mlp(1, &[], 1, 0.0, 0.0);
    let mut p = ModelParams::zeros_like(&spec);
    p.layers[0].weight.set(0, 0, w);
    p
}

/// Parameter after `grads.len()` steps of `opt` from `w0`.
pub fn optimizer_trajectory(opt: OptimizerSpec, w0: f64, grads: &[f64]) -> f64 {
    let mut p = scalar_params(w0);
    let mut state = OptimizerState::new(&opt, &p);
    for &g in grads {
        let grad = scalar_params(g);
        step(&opt, &mut state, &mut p, &grad, opt.lr, &[true]).unwrap();
    }
    p.layers[0].weight.get(0, 0)
}

/// Two steps of each optimizer against values worked out by hand with the
/// standard hyperparameters (momentum 0.9, beta1 0.9, beta2 0.999, rho 0.9,
/// epsilon 1e-8).
pub fn check_optimizer_steps() -> Check {
    let eps = 1e-8;
    let cases = [
        ("sgd", optimizer_trajectory(OptimizerSpec::sgd(0.1, 0.0), 1.0, &[2.0, -1.0]), 1.0 - 0.2 + 0.1),
        // v1 = 0.2, v2 = 0.9*0.2 + 0.1*(-1) = 0.08
        ("momentum", optimizer_trajectory(OptimizerSpec::sgd(0.1, 0.9), 1.0, &[2.0, -1.0]), 1.0 - 0.2 - 0.08),
        // G1 = 4, G2 = 5
        ("adagrad", optimizer_trajectory(OptimizerSpec::adagrad(0.1), 0.0, &[2.0, 1.0]), -0.1 * 2.0 / (2.0 + eps) - 0.1 / (5f64.sqrt() + eps)),
        // E1 = 0.4, E2 = 0.36 + 0.1 = 0.46
        ("rmsprop", optimizer_trajectory(OptimizerSpec::rmsprop(0.01), 0.0, &[2.0, 1.0]), -0.01 * 2.0 / (0.4f64.sqrt() + eps) - 0.01 / (0.46f64.sqrt() + eps)),
        ("adam", optimizer_trajectory(OptimizerSpec::adam(0.1), 0.0, &[1.0]), -0.1 / (1.0 + eps)),
    ];
    for (name, got, want) in cases {
        ensure((got - want).abs() <= 1e-14, || format!("{name}: got {got}, hand value {want}"))?;
    }
    // Adam step 2 with g = (1, 1): m̂ = v̂ = 1 again
    let two = optimizer_trajectory(OptimizerSpec::adam(0.1), 0.0, &[1.0, 1.0]);
    let want = -0.2 / (1.0 + eps);
    ensure((two - want).abs() <= 1e-14, || format!("adam two steps: got {two}, hand value {want}"))
}

fn permute_predictions(preds: &[Vec<usize>], perm: &[usize]) -> Vec<Vec<usize>> {
    perm.iter().map(|&i| preds[i].clone()).collect()
}

pub fn check_similarity(seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let (k, n, classes) = (5, 60, 4);
    let labels = random_labels(n, classes, &mut rng);
    // models agree with the labels at different rates
    let preds: Vec<Vec<usize>> = (0..k)
        .map(|m| {
            let keep = 0.3 + 0.15 * m as f64;
            labels.iter().map(|&l| if rng.uniform() < keep { l } else { rng.below(classes as u64) as usize }).collect()
        })
        .collect();
    let sim = similarity_matrix(&preds).unwrap();
    let acc: Vec<f64> = preds.iter().map(|p| p.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / n as f64).collect();
    for i in 0..k {
        ensure(sim.get(i, i) == 1.0, || format!("diagonal {i} is {}", sim.get(i, i)))?;
        for j in 0..k {
            ensure(sim.get(i, j) == sim.get(j, i), || format!("asymmetric at ({i},{j})"))?;
            let bound = acc[i] + acc[j] - 1.0;
            ensure(sim.get(i, j) >= bound - 1e-12, || format!("similarity {} below overlap bound {bound} at ({i},{j})", sim.get(i, j)))?;
        }
    }
    let perm = rng.permutation(k);
    let permuted = similarity_matrix(&permute_predictions(&preds, &perm)).unwrap();
    for i in 0..k {
        for j in 0..k {
            ensure(permuted.get(i, j) == sim.get(perm[i], perm[j]), || format!("permutation changed entry ({i},{j})"))?;
        }
    }
    Ok(())
}

/// Quantile of the piecewise-linear curve through `(i / (n - 1), sorted[i])`,
/// found by scanning segments.
pub fn percentile_oracle(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let step = 1.0 / (n - 1) as f64;
    for i in 0..n - 1 {
        let (x0, x1) = (i as f64 * step, (i + 1) as f64 * step);
        if q <= x1 || i == n - 2 {
            let t = ((q - x0) / (x1 - x0)).clamp(0.0, 1.0);
            return sorted[i] * (1.0 - t) + sorted[i + 1] * t;
        }
    }
    unreachable!()
}

pub fn check_percentiles(seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let n = 1 + rng.below(400) as usize;
    let values: Vec<f64> = (0..n).map(|_| (3.0 * rng.normal()).exp()).collect();
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let stats = loss_stats(&values).unwrap();
    for (q, got) in [(0.90, stats.p90), (0.95, stats.p95)] {
        let want = percentile_oracle(&values, q);
        let tol = 1e-12 * want.abs().max(1.0);
        ensure((got - want).abs() <= tol, || format!("p{} = {got}, oracle {want}", q * 100.0))?;
    }
    let mut prev = f64::NEG_INFINITY;
    for i in 0..=20 {
        let q = i as f64 / 20.0;
        let p = percentile(&sorted, q);
        let want = percentile_oracle(&values, q);
        ensure((p - want).abs() <= 1e-12 * want.abs().max(1.0), || format!("q={q}: {p} vs oracle {want}"))?;
        ensure(p >= prev, || format!("percentile decreased at q={q}"))?;
        prev = p;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    ensure((stats.mean - mean).abs() <= 1e-12 * mean.abs().max(1.0), || "mean disagrees".into())
}

/// Random spec and parameters, including negative zero and subnormals.
pub fn check_checkpoint_round_trip(seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let depth = rng.below(4) as usize;
    let hidden: Vec<usize> = (0..depth).map(|_| 1 + rng.below(9) as usize).collect();
    let spec = NetworkSpec::mlp(1 + rng.below(12) as usize, &hidden, 2 + rng.below(5) as usize, 0.25, 1e-4);
    let mut params = ModelParams::init(&spec, &mut rng).unwrap();
    params.layers[0].weight.as_mut_slice()[0] = -0.0;
    params.layers[0].bias[0] = f64::MIN_POSITIVE / 4.0;
    let model = Model::Network { spec: spec.clone(), params: params.clone() };
    let bytes = encode(&model).unwrap();
    let Model::Network { spec: s2, params: p2 } = decode(&bytes).unwrap() else {
        return Err("network decoded as another kind".into());
    };
    ensure(s2 == spec, || "spec changed in round trip".into())?;
    for (a, b) in params.layers.iter().zip(&p2.layers) {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(bits(a.weight.as_slice()) == bits(b.weight.as_slice()) && bits(&a.bias) == bits(&b.bias), || {
            "parameters changed bits in round trip".into()
        })?;
    }
    ensure(encode(&Model::Network { spec: s2, params: p2 }).unwrap() == bytes, || "re-encoding changed bytes".into())
}

/// A hand-assembled 2-image 2x3 IDX pair.
pub fn check_idx_golden() -> Check {
    let images: Vec<u8> = [
        &[0x00, 0x00, 0x08, 0x03][..],
        &[0, 0, 0, 2],
        &[0, 0, 0, 2],
        &[0, 0, 0, 3],
        &[0, 51, 102, 153, 204, 255],
        &[255, 0, 255, 0, 255, 0],
    ]
    .concat();
    let labels = [0x00, 0x00, 0x08, 0x01, 0, 0, 0, 2, 9, 3];
    let ds: Dataset = idx_dataset(&images, &labels, "golden").map_err(|e| e.to_string())?;
    ensure(ds.features.shape() == (2, 6), || format!("shape {:?}", ds.features.shape()))?;
    ensure(ds.features.row(0) == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0], || format!("row 0 = {:?}", ds.features.row(0)))?;
    ensure(ds.features.row(1) == [1.0, 0.0, 1.0, 0.0, 1.0, 0.0], || format!("row 1 = {:?}", ds.features.row(1)))?;
    ensure(ds.labels == [9, 3], || format!("labels {:?}", ds.labels))?;
    let mut bad = images.clone();
    bad[3] = 0x02;
    ensure(idx_dataset(&bad, &labels, "bad").is_err(), || "wrong rank accepted".into())?;
    ensure(idx_dataset(&images[..images.len() - 1], &labels, "short").is_err(), || "truncated images accepted".into())
}
