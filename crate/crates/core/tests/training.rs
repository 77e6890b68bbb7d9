use mctnet::checkpoint::Checkpoint;
use mctnet::config::network_digest;
use mctnet::data::synth::{generate, SplitCounts, SynthConfig};
use mctnet::data::ChangeSample;
use mctnet::network::{Mctnet, NetworkConfig};
use mctnet::tensor::{Family, ParamKind, ParamStore, Tensor};
use mctnet::training::{lr_at, train, train_epoch, OptimConfig, Sgd, TrainOptions, TrainState};
use mctnet::Error;

fn samples(n: usize, seed: u64) -> Vec<ChangeSample> {
    let cfg = SynthConfig {
        image_size: 32,
        changes: [1, 3],
        size_mix: [2.0, 1.0, 0.0],
        splits: SplitCounts { train: n, val: 0, test: 0 },
        ..SynthConfig::default()
    };
    generate(&cfg, seed).unwrap()
}

fn learnables(store: &ParamStore) -> Vec<Tensor> {
    store.learnable().map(|id| store.get(id).value.clone()).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (net, mut store) = Mctnet::build(NetworkConfig::tiny(), 1).unwrap();
    let before = learnables(&store);
    let cfg = OptimConfig {
        lr0: 0.0,
        batch_size: 4,
        ..OptimConfig::default()
    };
    let mut state = TrainState::new(&store, &cfg);
    let loss = train_epoch(&net, &mut store, &mut state, &samples(4, 2), &cfg).unwrap();
    assert!(loss.is_finite());
    assert_eq!(learnables(&store), before);
    assert_eq!(state.epoch, 1);
}

#[test]
fn fixed_seed_runs_are_identical() {
    let data = samples(6, 3);
    let (tr, val) = data.split_at(4);
    let cfg = OptimConfig {
        total_epochs: 3,
        batch_size: 2,
        seed: 4,
        ..OptimConfig::default()
    };
    let run = || {
        let (net, mut store) = Mctnet::build(NetworkConfig::tiny(), 5).unwrap();
        let report = train(&net, &mut store, tr, val, &cfg, TrainOptions::default()).unwrap();
        let digest = network_digest(net.config());
        let bytes = Checkpoint::from_store(&report.best, digest).encode();
        let losses: Vec<u64> = report.records.iter().map(|r| r.train_loss.to_bits()).collect();
        (bytes, losses, Checkpoint::from_store(&store, digest).encode())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.1, b.1);
    assert_eq!(a.0, b.0);
    assert_eq!(a.2, b.2);
}

#[test]
fn small_steps_reduce_the_loss() {
    let (net, mut store) = Mctnet::build(NetworkConfig::tiny(), 6).unwrap();
    let cfg = OptimConfig {
        lr0: 1e-3,
        total_epochs: 30,
        batch_size: 4,
        ..OptimConfig::default()
    };
    let data = samples(4, 7);
    let mut state = TrainState::new(&store, &cfg);
    for _ in 0..10 {
        train_epoch(&net, &mut store, &mut state, &data, &cfg).unwrap();
    }
    assert!(state.losses.last().unwrap() < &state.losses[0], "{:?}", state.losses);
}

fn scalar_store(names: &[&str], values: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, v) in names.iter().zip(values) {
        s.insert(*n, Tensor::scalar(*v), ParamKind::Learnable, Family::Linear);
    }
    s
}

#[test]
fn quadratic_steps_follow_the_recurrence() {
    // f(p) = a p^2 / 2, so g = a p
    let (a, lr, m, wd) = (3.0, 0.05, 0.9, 0.01);
    let mut store = scalar_store(&["p"], &[2.0]);
    let id = store.id("p").unwrap();
    let mut sgd = Sgd::new(&store);
    let (mut p, mut v) = (2.0f64, 0.0f64);
    for _ in 0..2 {
        store.get_mut(id).grad = vec![a * store.get(id).value.data()[0]];
        sgd.step(&mut store, lr, m, wd).unwrap();
        v = m * v + (a * p + wd * p);
        p -= lr * v;
    }
    assert_eq!(store.get(id).value.data()[0], p);
    assert_eq!(sgd.velocity(id).unwrap(), &[v]);
    // hand-rolled: v1 = 6.02, p1 = 1.699; v2 = 0.9 * 6.02 + 3.01 * 1.699
    let v1 = 3.0 * 2.0 + 0.01 * 2.0;
    let p1 = 2.0 - 0.05 * v1;
    let v2 = 0.9 * v1 + (3.0 + 0.01) * p1;
    assert!((p - (p1 - 0.05 * v2)).abs() <= 1e-15);
}

#[test]
fn step_ignores_parameter_order() {
    let mut ab = scalar_store(&["a", "b"], &[1.0, -2.0]);
    let mut ba = scalar_store(&["b", "a"], &[-2.0, 1.0]);
    let grads = [("a", 0.3), ("b", -0.7)];
    let (mut s1, mut s2) = (Sgd::new(&ab), Sgd::new(&ba));
    for _ in 0..3 {
        for (name, g) in grads {
            let (i, j) = (ab.id(name).unwrap(), ba.id(name).unwrap());
            ab.get_mut(i).grad = vec![g];
            ba.get_mut(j).grad = vec![g];
        }
        s1.step(&mut ab, 0.1, 0.99, 0.001).unwrap();
        s2.step(&mut ba, 0.1, 0.99, 0.001).unwrap();
    }
    for name in ["a", "b"] {
        assert_eq!(ab.get(ab.id(name).unwrap()).value, ba.get(ba.id(name).unwrap()).value);
    }
}

#[test]
fn optimizer_rejects_a_foreign_store() {
    let mut one = scalar_store(&["a"], &[1.0]);
    let two = scalar_store(&["a", "b"], &[1.0, 2.0]);
    assert!(Sgd::new(&two).step(&mut one, 0.1, 0.9, 0.0).is_err());
}

#[test]
fn schedule_decays_once_at_a_third() {
    let cfg = OptimConfig {
        total_epochs: 200,
        ..OptimConfig::default()
    };
    assert_eq!(cfg.decay_epoch(), 66);
    assert_eq!(lr_at(65, &cfg), 0.001);
    assert_eq!(lr_at(66, &cfg), 0.001 * 0.1);
    assert_eq!(lr_at(199, &cfg), 0.001 * 0.1);
}

#[test]
fn divergence_names_epoch_batch_and_parameter() {
    let (net, mut store) = Mctnet::build(NetworkConfig::tiny(), 8).unwrap();
    let cfg = OptimConfig {
        lr0: 1e300,
        batch_size: 2,
        ..OptimConfig::default()
    };
    let mut state = TrainState::new(&store, &cfg);
    match train_epoch(&net, &mut store, &mut state, &samples(4, 9), &cfg) {
        Err(Error::Diverged { epoch, batch, detail }) => {
            assert_eq!(epoch, 0);
            assert!(batch <= 1);
            assert!(detail.contains('.'), "no parameter name in {detail:?}");
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn empty_splits_are_rejected() {
    let (net, mut store) = Mctnet::build(NetworkConfig::tiny(), 10).unwrap();
    let data = samples(2, 11);
    let r = train(&net, &mut store, &data, &[], &OptimConfig::default(), TrainOptions::default());
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn best_parameters_follow_validation_f1() {
    let data = samples(6, 12);
    let cfg = OptimConfig {
        total_epochs: 4,
        batch_size: 4,
        seed: 13,
        ..OptimConfig::default()
    };
    let (net, mut store) = Mctnet::build(NetworkConfig::tiny(), 14).unwrap();
    let report = train(&net, &mut store, &data[..4], &data[4..], &cfg, TrainOptions::default()).unwrap();
    let f1s: Vec<f64> = report.records.iter().map(|r| r.val.f1).collect();
    let best = f1s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(report.best_f1, best);
    assert_eq!(report.best_epoch, f1s.iter().position(|&f| f == best).unwrap());
}
