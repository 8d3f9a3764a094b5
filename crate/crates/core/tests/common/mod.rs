//! Shared fixtures for integration and acceptance tests.

#![allow(dead_code)]

use rand::Rng;
use usplane::diffnet::{ModelParams, NetConfig, Real, ScalarFn, Tape, Tensor, Var};
use usplane::geom3d::seeded_rng;
use usplane::implicit::{Domain, FieldConfig, ImplicitField};
use usplane::pipeline::{cycle_loss, finetune_loss, training_loss, LinkCycle, LossWeights};
use usplane::{PlaneLocation, SliceImage};

pub fn tiny_net(seed: u64) -> ModelParams {
    let cfg = NetConfig {
        input: (8, 8),
        channels: vec![2, 3],
        hidden: 4,
        anchor_center: [4.0; 3],
        anchor_scale: 3.0,
        ..NetConfig::default()
    };
    ModelParams::init(cfg, seed).unwrap()
}

pub fn random_labeled(seed: u64) -> SliceImage {
    let mut rng = seeded_rng(seed);
    let px = (0..64).map(|_| rng.random::<f32>()).collect();
    let mut rows = [[0.0; 3]; 3];
    for r in &mut rows {
        for c in r.iter_mut() {
            *c = rng.random_range(0.0..8.0);
        }
    }
    SliceImage::new(8, 8, 1.0, px)
        .unwrap()
        .with_location(PlaneLocation::new(rows).unwrap())
}

pub fn flat_point(m: &ModelParams) -> Vec<f64> {
    m.flat().iter().map(|v| *v as f64).collect()
}

pub struct TrainingLossFn {
    pub model: ModelParams,
    pub batch: Vec<SliceImage>,
    pub weights: LossWeights,
}

impl ScalarFn for TrainingLossFn {
    fn dim(&self) -> usize {
        self.model.num_params()
    }
    fn record<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let b = self.model.bind_flat(tape, x);
        let refs: Vec<&SliceImage> = self.batch.iter().collect();
        training_loss(&self.model, tape, &b, &refs, &self.weights)
            .unwrap()
            .total
    }
}

pub type Cycle = LinkCycle;

pub fn random_cycle(seed: u64, links: usize) -> Cycle {
    let views = (0..links)
        .map(|j| {
            (
                random_labeled(seed * 100 + 2 * j as u64),
                random_labeled(seed * 100 + 2 * j as u64 + 1),
            )
        })
        .collect();
    let mut rng = seeded_rng(seed ^ 0xC1C1E);
    let d = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
    (views, d)
}

pub struct CycleLossFn {
    pub model: ModelParams,
    pub cycles: Vec<Cycle>,
}

impl ScalarFn for CycleLossFn {
    fn dim(&self) -> usize {
        self.model.num_params()
    }
    fn record<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let b = self.model.bind_flat(tape, x);
        cycle_loss(&self.model, tape, &b, &self.cycles).unwrap()
    }
}

pub struct FinetuneLossFn {
    pub model: ModelParams,
    pub batch: Vec<SliceImage>,
    pub cycles: Vec<Cycle>,
    pub w_c: f64,
}

impl ScalarFn for FinetuneLossFn {
    fn dim(&self) -> usize {
        self.model.num_params()
    }
    fn record<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let b = self.model.bind_flat(tape, x);
        let refs: Vec<&SliceImage> = self.batch.iter().collect();
        let l_t = training_loss(&self.model, tape, &b, &refs, &LossWeights::default())
            .unwrap()
            .total;
        let l_c = cycle_loss(&self.model, tape, &b, &self.cycles).unwrap();
        finetune_loss(tape, l_c, l_t, self.w_c)
    }
}

pub fn tiny_field(seed: u64) -> ImplicitField {
    let dom = Domain::new([0.0; 3], [16.0; 3]).unwrap();
    ImplicitField::init(
        FieldConfig {
            octaves: 2,
            hidden: 5,
        },
        dom,
        seed,
    )
    .unwrap()
}

/// Sum of squared field values at fixed points.
pub struct QueryFn {
    pub field: ImplicitField,
    pub points: Vec<f64>,
}

impl ScalarFn for QueryFn {
    fn dim(&self) -> usize {
        self.field.num_params()
    }
    fn record<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let vars = self.field.bind_flat(tape, x);
        let p = tape.constant(Tensor::from_f64(&[self.points.len() / 3, 3], &self.points));
        let y = self.field.record(tape, &vars, p);
        let sq = tape.mul(y, y);
        tape.sum(sq)
    }
}

/// Pixel MSE of the field against fixed targets.
pub struct FieldFitFn {
    pub field: ImplicitField,
    pub points: Vec<f64>,
    pub targets: Vec<f64>,
}

impl ScalarFn for FieldFitFn {
    fn dim(&self) -> usize {
        self.field.num_params()
    }
    fn record<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let vars = self.field.bind_flat(tape, x);
        let p = tape.constant(Tensor::from_f64(&[self.targets.len(), 3], &self.points));
        let y = self.field.record(tape, &vars, p);
        let t = tape.constant(Tensor::from_f64(&[self.targets.len(), 1], &self.targets));
        tape.mse(y, t)
    }
}

pub fn field_points(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed);
    (0..3 * n).map(|_| rng.random_range(0.5..15.5)).collect()
}
