mod common;

use common::*;
use usplane::diffnet::{grad_check, GradCheckConfig, Precision};
use usplane::pipeline::LossWeights;

fn both(f: &impl usplane::diffnet::ScalarFn, point: &[f64]) {
    let s = grad_check(f, point, &GradCheckConfig::new(Precision::Single));
    assert!(s.max_rel_error <= 1e-3, "single {s:?}");
    let d = grad_check(f, point, &GradCheckConfig::new(Precision::Double));
    assert!(d.max_rel_error <= 1e-6, "double {d:?}");
    assert!(s.checked > s.skipped && d.checked > d.skipped);
}

#[test]
fn training_loss_gradient() {
    let model = tiny_net(3);
    let point = flat_point(&model);
    let f = TrainingLossFn {
        model,
        batch: vec![random_labeled(1), random_labeled(2)],
        weights: LossWeights::default(),
    };
    both(&f, &point);
}

#[test]
fn cycle_loss_gradient() {
    let model = tiny_net(4);
    let point = flat_point(&model);
    let f = CycleLossFn {
        model,
        cycles: vec![random_cycle(1, 3), random_cycle(2, 2)],
    };
    both(&f, &point);
}

#[test]
fn finetune_loss_gradient() {
    let model = tiny_net(5);
    let point = flat_point(&model);
    let f = FinetuneLossFn {
        model,
        batch: vec![random_labeled(7), random_labeled(8), random_labeled(9)],
        cycles: vec![random_cycle(3, 2)],
        w_c: 0.7,
    };
    both(&f, &point);
}

#[test]
fn field_query_and_fit_gradients() {
    let field = tiny_field(6);
    let point: Vec<f64> = field.flat().iter().map(|v| *v as f64).collect();
    let q = QueryFn {
        field: field.clone(),
        points: field_points(5, 1),
    };
    both(&q, &point);
    let fit = FieldFitFn {
        field,
        points: field_points(6, 2),
        targets: vec![0.1, 0.8, 0.3, 0.5, 0.9, 0.2],
    };
    both(&fit, &point);
}
