//! End-to-end training behavior: implicit gradients against finite
//! differences, loss decomposition, and a smoke-training run.

use mdbm::meanfield::SolverConfig;
use mdbm::model::{Arch, MdbmModel};
use mdbm::train::{LossConfig, Optimizer};
use mdbm::verify;

#[test]
fn training_gradients_match_finite_differences() {
    let res = verify::check_train_gradient_fd(4);
    assert!(res.passed, "{}", res.detail);
}

#[test]
fn loss_decomposes_exactly() {
    let res = verify::check_loss_decomposition();
    assert!(res.passed, "{}", res.detail);
}

#[test]
fn smoke_training_halves_the_loss() {
    let res = verify::check_smoke_train(200);
    assert!(res.passed, "{}", res.detail);
}

#[test]
fn zero_learning_rate_freezes_everything() {
    let arch = Arch::tiny_labeled(3, 2, 2, 0.1);
    let mut model = MdbmModel::init(&arch, 7, true).unwrap();
    let mut r = verify::rng(7);
    model.bias = verify::randn(&mut r, model.total_len(), 0.3);
    let samples: Vec<_> = (0..6)
        .map(|i| {
            let mask = verify::random_mask(i, &model, 0.6);
            verify::random_sample(i + 100, &model, mask)
        })
        .collect();
    let mut opt = Optimizer::new(&model, 0.0);
    let solver = SolverConfig::training();
    let loss_cfg = LossConfig::default();
    let before: Vec<Vec<f64>> = model
        .weights
        .blocks()
        .iter()
        .map(|b| b.weights.clone())
        .collect();
    let m1 = mdbm::train::train_epoch(&mut model, &samples, 3, &solver, &loss_cfg, &mut opt, 0)
        .unwrap();
    let m2 = mdbm::train::train_epoch(&mut model, &samples, 3, &solver, &loss_cfg, &mut opt, 1)
        .unwrap();
    assert_eq!(m1.mean_loss, m2.mean_loss);
    for (a, b) in model.weights.blocks().iter().zip(&before) {
        assert_eq!(&a.weights, b);
    }
}
