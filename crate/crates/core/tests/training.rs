use snet::data::{synth_blobs, Dataset};
use snet::ensemble::{build_supernet, retrain_supernet, InitMode, RetrainConfig};
use snet::network::{ModelParams, NetworkSpec};
use snet::optim::{CycleShape, LrSchedule, OptimizerSpec};
use snet::snapshots::{harvest, SnapshotConfig};
use snet::trainer::{descending_layer_training, retrain_last_layer, train, TrainConfig};
use snet::Rng;

fn data() -> (Dataset, Dataset) {
    (synth_blobs(240, 5, 3, 2.5, 1).unwrap(), synth_blobs(90, 5, 3, 2.5, 2).unwrap())
}

fn spec() -> NetworkSpec {
    NetworkSpec::mlp(5, &[10, 8, 6], 3, 0.2, 1e-4)
}

fn init(seed: u64) -> ModelParams {
    ModelParams::init(&spec(), &mut Rng::new(seed)).unwrap()
}

fn config(seed: u64) -> TrainConfig {
    TrainConfig::new(OptimizerSpec::adam(0.01), 32, 4).with_patience(2).with_seed(seed)
}

#[test]
fn training_is_a_function_of_the_seed() {
    let (tr, va) = data();
    let a = train(init(1), &spec(), &tr, &va, &config(5)).unwrap();
    let b = train(init(1), &spec(), &tr, &va, &config(5)).unwrap();
    assert_eq!(a.params, b.params);
    let strip = |h: &[snet::trainer::MetricsRecord]| h.iter().map(|r| (r.train_loss, r.val_loss, r.val_acc)).collect::<Vec<_>>();
    assert_eq!(strip(&a.history), strip(&b.history));
    let c = train(init(1), &spec(), &tr, &va, &config(6)).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn last_layer_retraining_freezes_the_body() {
    let (tr, va) = data();
    let start = init(2);
    let out = retrain_last_layer(start.clone(), &spec(), &tr, &va, &config(3), 3).unwrap();
    let n = start.layers.len();
    assert_eq!(out.params.layers[..n - 1], start.layers[..n - 1]);
    assert_ne!(out.params.layers[n - 1], start.layers[n - 1]);
}

#[test]
fn descending_stages_touch_one_layer_each() {
    let (tr, va) = data();
    let start = init(3);
    let (end, stages) = descending_layer_training(start.clone(), &spec(), &tr, &va, 3, 2, &config(4)).unwrap();
    assert_eq!(stages.iter().map(|s| s.layer).collect::<Vec<_>>(), [3, 2, 1]);
    assert!(stages.iter().all(|s| s.history.len() == 2));
    assert_eq!(end.layers[0], start.layers[0]);
    for l in 1..4 {
        assert_ne!(end.layers[l], start.layers[l], "layer {l} untouched");
    }
}

fn snapshot_config(seed: u64) -> SnapshotConfig {
    SnapshotConfig {
        train: TrainConfig::new(OptimizerSpec::sgd(0.05, 0.9), 32, 1).with_seed(seed),
        warmup_epochs: 1,
        n_cycles: 4,
        cycle: LrSchedule::Cyclic { lr_max: 0.05, lr_min: 0.0005, cycle_len: 8, shape: CycleShape::Cosine },
    }
}

#[test]
fn snapshots_are_deterministic_and_distinct() {
    let (tr, va) = data();
    let a = harvest(init(4), &spec(), &tr, &va, &snapshot_config(9)).unwrap();
    let b = harvest(init(4), &spec(), &tr, &va, &snapshot_config(9)).unwrap();
    assert_eq!(a.snapshots.len(), 4);
    for (x, y) in a.snapshots.iter().zip(&b.snapshots) {
        assert_eq!(x.params, y.params);
        assert_eq!(x.report, y.report);
    }
    for i in 0..4 {
        for j in i + 1..4 {
            assert_ne!(a.snapshots[i].params, a.snapshots[j].params);
        }
    }
    // 240 examples in batches of 32: 8 steps per epoch, so each cycle is one epoch
    assert_eq!(a.history.len(), 1 + 4);
}

#[test]
fn supernet_retraining_is_deterministic_and_keeps_branches() {
    let (tr, va) = data();
    let branches: Vec<_> = (0..3)
        .map(|i| {
            let s = NetworkSpec::mlp(5, &[4], 3, 0.0, 0.0);
            let p = train(ModelParams::init(&s, &mut Rng::new(i)).unwrap(), &s, &tr, &va, &config(i)).unwrap().params;
            (s, p)
        })
        .collect();
    let cfg = RetrainConfig { train: config(8), l2: 1e-3, l2_bias: false };
    let run = || {
        let model = build_supernet(&branches, InitMode::scaled(3.0), &mut Rng::new(1)).unwrap();
        retrain_supernet(model, &tr, &va, &cfg).unwrap().0
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    for (merged, (_, p)) in a.branches.iter().zip(&branches) {
        assert_eq!(merged.body.as_slice(), &p.layers[..1]);
    }
}
