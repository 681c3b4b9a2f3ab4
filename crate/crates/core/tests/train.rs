mod common;

use common::*;
use nestnet_core::data::Sample;
use nestnet_core::model::{NestNet, NestNetConfig, ResidualSpec, SkipVariant};
use nestnet_core::train::*;
use proptest::prelude::*;
use rand::Rng;

/// Scalar Adam written out line by line.
fn reference_adam(x0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    let mut path = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        x -= lr * m_hat / (v_hat.sqrt() + eps);
        path.push(x);
    }
    path
}

fn run_adam(x0: f64, grads: &[f64], cfg: AdamConfig) -> (Vec<f64>, AdamState<f64>) {
    let mut state = AdamState::<f64>::new([1], cfg);
    let mut x = [x0];
    let mut path = Vec::new();
    for g in grads {
        adam_step(&mut [&mut x[..]], &[&[*g][..]], &mut state).unwrap();
        path.push(x[0]);
    }
    (path, state)
}

proptest! {
    #[test]
    fn adam_matches_scalar_reference(
        x0 in -5.0f64..5.0,
        grads in proptest::collection::vec(-10.0f64..10.0, 1..40),
        lr in 1e-4f64..0.5,
    ) {
        let cfg = AdamConfig { lr, ..AdamConfig::default() };
        let expect = reference_adam(x0, &grads, lr, cfg.beta1, cfg.beta2, cfg.eps);
        let (path, state) = run_adam(x0, &grads, cfg);
        prop_assert_eq!(state.t, grads.len() as u64);
        prop_assert!(state.v[0][0] >= 0.0);
        for (a, e) in path.iter().zip(&expect) {
            prop_assert!((a - e).abs() < 1e-7);
        }
    }
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let (path, state) = run_adam(0.75, &[0.0; 5], AdamConfig::default());
    assert!(path.iter().all(|x| *x == 0.75));
    assert_eq!(state.t, 5);
}

#[test]
fn first_step_moves_by_learning_rate_against_the_gradient() {
    for g in [3.0, -0.02, 250.0] {
        let cfg = AdamConfig::default();
        let (path, _) = run_adam(1.0, &[g], cfg);
        let expect = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
        assert!((path[0] - expect).abs() < 1e-12);
        assert!((path[0] - (1.0 - cfg.lr * g.signum())).abs() < 1e-8);
    }
}

#[test]
fn minimizes_a_parabola() {
    let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
    let mut state = AdamState::<f64>::new([1], cfg);
    let mut x = [1.0f64];
    let mut reached = None;
    for step in 1..=200 {
        let g = 2.0 * x[0];
        adam_step(&mut [&mut x[..]], &[&[g][..]], &mut state).unwrap();
        if x[0].abs() < 1e-2 && reached.is_none() {
            reached = Some(step);
        }
    }
    assert!(reached.is_some(), "never reached |x| < 1e-2, ended at {}", x[0]);
}

#[test]
fn adam_rejects_mismatched_shapes() {
    let mut state = AdamState::<f32>::new([2], AdamConfig::default());
    let mut p = [0.0f32; 3];
    assert!(matches!(adam_step(&mut [&mut p[..]], &[&[1.0, 2.0, 3.0][..]], &mut state), Err(TrainError::Adam(_))));
    let mut q = [0.0f32; 2];
    assert!(adam_step(&mut [&mut q[..]], &[&[1.0][..]], &mut state).is_err());
    assert!(adam_step(&mut [&mut q[..]], &[], &mut state).is_err());
    assert_eq!(state.t, 0);
}

fn sample(identity: usize, session: Option<u8>, index: usize, size: usize, pixels: Vec<f32>) -> Sample {
    Sample { identity, session, index, size, pixels, core_box: None }
}

#[test]
fn split_is_a_disjoint_exact_cover() {
    let samples: Vec<Sample> =
        (0..10).map(|i| sample(i % 3, Some(if (i / 2) % 2 == 0 { 1 } else { 2 }), i, 2, vec![i as f32; 4])).collect();
    let split = split_sessions(&samples).unwrap();
    assert_eq!((split.train.len(), split.test.len()), (6, 4));
    let mut seen: Vec<usize> = split.train.iter().chain(&split.test).map(|s| s.index).collect();
    seen.sort();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
    assert!(split.train.iter().all(|s| s.session == Some(1)));
    assert!(split.test.iter().all(|s| s.session == Some(2)));
    assert_eq!(split.train_labels.len(), 3);
}

#[test]
fn split_edge_cases() {
    let only_one: Vec<Sample> = (0..4).map(|i| sample(0, Some(1), i, 1, vec![0.0])).collect();
    let split = split_sessions(&only_one).unwrap();
    assert!(split.test.is_empty());
    assert!(split.test_labels.is_empty());
    let mut broken = only_one.clone();
    broken[2].session = None;
    assert_eq!(split_sessions(&broken).unwrap_err(), TrainError::MissingSession(2));
    broken[2].session = Some(3);
    assert!(matches!(split_sessions(&broken), Err(TrainError::BadSession { index: 2, session: 3 })));
}

fn tiny_model(classes: usize, seed: u64) -> NestNet {
    let cfg = NestNetConfig {
        input_size: 32,
        conv_block_filters: vec![8, 8, 8],
        residual_plan: vec![ResidualSpec::new(SkipVariant::Identity, 8, 8), ResidualSpec::new(SkipVariant::Conv, 8, 16)],
        num_classes: classes,
        groupnorm_groups: 4,
        embedding_dim: 16,
        ..NestNetConfig::default()
    };
    NestNet::build(cfg, seed).unwrap()
}

fn tiny_dataset(classes: usize, per_class: usize, seed: u64) -> Vec<Sample> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for c in 0..classes {
        let base: Vec<f32> = (0..32 * 32).map(|_| r.random_range(0.0..1.0)).collect();
        for i in 0..per_class {
            let pixels = base.iter().map(|v| (v + r.random_range(-0.1f32..0.1)).clamp(0.0, 1.0)).collect();
            out.push(sample(c, Some(1), i, 32, pixels));
        }
    }
    out
}

#[test]
fn training_is_reproducible_and_learns() {
    let data = tiny_dataset(3, 4, 1);
    let opts = TrainOptions { epochs: 8, batch_size: 5, adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() }, seed: 9 };
    let a = train(tiny_model(3, 4), &data, opts).unwrap();
    let b = train(tiny_model(3, 4), &data, opts).unwrap();
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(a.epoch_losses.len(), 8);
    for ((_, x), (_, y)) in a.model.parameters().iter().zip(b.model.parameters()) {
        assert_eq!(x.values(), y.values());
    }
    assert!(a.epoch_losses.iter().all(|l| l.is_finite()));
    assert!(a.epoch_losses.last() < a.epoch_losses.first());
    assert!(accuracy(&a.model, &data, 4).unwrap() > 0.9);

    let c = train(tiny_model(3, 4), &data, TrainOptions { seed: 10, ..opts }).unwrap();
    assert_ne!(a.epoch_losses, c.epoch_losses);
}

#[test]
fn single_class_loss_vanishes() {
    let data: Vec<Sample> = (0..4).map(|i| sample(0, Some(1), i, 32, vec![0.5; 1024])).collect();
    let run = train(tiny_model(1, 2), &data, TrainOptions { epochs: 3, batch_size: 2, ..TrainOptions::default() }).unwrap();
    assert!(run.epoch_losses.iter().all(|l| l.abs() < 1e-6));
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let data = tiny_dataset(2, 2, 3);
    let init = tiny_model(2, 6);
    let run = train(init.clone(), &data, TrainOptions { epochs: 0, ..TrainOptions::default() }).unwrap();
    assert!(run.epoch_losses.is_empty());
    for ((_, x), (_, y)) in init.parameters().iter().zip(run.model.parameters()) {
        assert_eq!(x.values(), y.values());
    }
}

#[test]
fn training_errors() {
    let data = tiny_dataset(2, 2, 3);
    let opts = TrainOptions { epochs: 1, batch_size: 2, ..TrainOptions::default() };
    assert_eq!(train(tiny_model(2, 0), &[], opts).unwrap_err(), TrainError::EmptyTrainingSet);
    assert_eq!(train(tiny_model(2, 0), &data, TrainOptions { batch_size: 0, ..opts }).unwrap_err(), TrainError::ZeroBatch);
    assert!(matches!(train(tiny_model(1, 0), &data, opts), Err(TrainError::LabelOutOfRange { label: 1, classes: 1 })));

    let mut poisoned = tiny_model(2, 0);
    poisoned.parameter_mut("res1.stem.conv2.bias").unwrap().values_mut()[0] = f32::NAN;
    match train(poisoned, &data, opts) {
        Err(TrainError::NonFinite { epoch: 1, batch: 1, layer }) => assert_eq!(layer, "res1.stem.conv2.bias"),
        other => panic!("expected a non-finite diagnostic, got {other:?}"),
    }
    let mut poisoned = tiny_model(2, 0);
    poisoned.parameter_mut("embed.bias").unwrap().values_mut()[0] = f32::INFINITY;
    match train(poisoned, &data, opts) {
        Err(TrainError::NonFinite { layer, .. }) => assert_eq!(layer, "embed.bias"),
        other => panic!("expected a non-finite diagnostic, got {other:?}"),
    }
}
