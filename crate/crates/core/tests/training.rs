use flcb::data_synth::{generate_domain, DomainSpec};
use flcb::density::downsample_density;
use flcb::losses::LossConfig;
use flcb::model::{DensityRegressor, OptimizerConfig, OptimizerState, TrainBatch, OUTPUT_STRIDE};
use flcb::ot::CostMatrix;

fn batch() -> TrainBatch {
    let mut spec = DomainSpec::poisson("fit", 12.0, 1.5, 0.1, 21);
    spec.image_size = (32, 32);
    spec.n_train = 4;
    spec.n_test = 1;
    let ds = generate_domain(&spec).unwrap();
    let cfg = LossConfig::default();
    TrainBatch {
        images: ds.train.iter().map(|a| a.image.clone()).collect(),
        targets: ds
            .train
            .iter()
            .map(|a| downsample_density(&a.density(cfg.sigma).unwrap(), OUTPUT_STRIDE).unwrap())
            .collect(),
        domain: 1,
    }
}

#[test]
fn zero_lambda_step_ignores_the_teacher() {
    let b = batch();
    let cost = CostMatrix::new(b.targets[0].shape()).unwrap();
    let teacher = DensityRegressor::new(99).snapshot(1);
    let cfg = LossConfig {
        lambda_: 0.0,
        ..Default::default()
    };
    let mut with = DensityRegressor::new(1);
    let mut without = with.clone();
    let mut opt_a = OptimizerState::new(OptimizerConfig::default());
    let mut opt_b = opt_a.clone();
    for _ in 0..3 {
        let (la, _) = with
            .train_step(&mut opt_a, &b, Some(&teacher), &cfg, &cost)
            .unwrap();
        let (lb, _) = without
            .train_step(&mut opt_b, &b, None, &cfg, &cost)
            .unwrap();
        assert_eq!(la.total, lb.total);
        assert!(la.distill_output > 0.0 && lb.distill_output == 0.0);
    }
    assert_eq!(with, without);
}

#[test]
fn a_single_batch_can_be_overfit() {
    let b = batch();
    let cost = CostMatrix::new(b.targets[0].shape()).unwrap();
    let cfg = LossConfig::default();
    let mut model = DensityRegressor::new(3);
    let mut opt = OptimizerState::new(OptimizerConfig {
        learning_rate: 3e-3,
        ..Default::default()
    });
    let (first, _) = model.train_step(&mut opt, &b, None, &cfg, &cost).unwrap();
    let mut last = first;
    for _ in 0..300 {
        last = model.train_step(&mut opt, &b, None, &cfg, &cost).unwrap().0;
    }
    assert!(last.l1 < 0.2 * first.l1, "l1 {} -> {}", first.l1, last.l1);
}

#[test]
fn distillation_pulls_the_student_toward_the_teacher() {
    let b = batch();
    let cost = CostMatrix::new(b.targets[0].shape()).unwrap();
    let cfg = LossConfig {
        lambda_: 1e3,
        ..Default::default()
    };
    let teacher = DensityRegressor::new(5).snapshot(1);
    let mut model = DensityRegressor::new(6);
    let mut opt = OptimizerState::new(OptimizerConfig::default());
    let (first, _) = model
        .train_step(&mut opt, &b, Some(&teacher), &cfg, &cost)
        .unwrap();
    let mut last = first;
    for _ in 0..100 {
        last = model
            .train_step(&mut opt, &b, Some(&teacher), &cfg, &cost)
            .unwrap()
            .0;
    }
    let d = |l: &flcb::losses::LossBreakdown| l.distill_output + l.distill_feature;
    assert!(d(&last) < 0.5 * d(&first), "{} -> {}", d(&first), d(&last));
}
