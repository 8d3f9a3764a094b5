//! Finite-difference validation of tape gradients.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::geom3d::seeded_rng;

/// Scalar function of a flat parameter vector, expressible on a tape in any
/// precision.
pub trait ScalarFn {
    fn dim(&self) -> usize;

    /// Records `f(x)` on `tape`, where `x` is an already-bound tracked leaf.
    fn record<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Var;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// `f32` tape against an `f64` central-difference oracle.
    Single,
    /// `f64` tape against an `f64` central-difference oracle.
    Double,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub precision: Precision,
    pub step: f64,
    /// Check a random subset of this many coordinates; `None` checks all.
    pub coords: Option<usize>,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn new(precision: Precision) -> Self {
        Self {
            precision,
            step: 1e-5,
            coords: None,
            seed: 0,
        }
    }

    pub fn with_coords(self, n: usize, seed: u64) -> Self {
        Self {
            coords: Some(n),
            seed,
            ..self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates whose difference stencil crosses a rectifier kink.
    pub skipped: usize,
}

fn evaluate<T: Real, F: ScalarFn>(
    f: &F,
    x: &[f64],
    grad: bool,
) -> (f64, Option<Vec<f64>>, Vec<bool>) {
    let mut tape = Tape::<T>::new();
    let v = tape.param(Tensor::from_f64(&[x.len()], x));
    let out = f.record(&mut tape, v);
    let value = tape.scalar(out).to_f64();
    let g = grad.then(|| {
        tape.backward(out)
            .get_or_zeros(v, x.len())
            .iter()
            .map(|g| g.to_f64())
            .collect()
    });
    (value, g, tape.relu_pattern())
}

/// Max over checked coordinates of
/// `|autodiff - central| / (|autodiff| + |central| + r)`, where
/// `r = 1e-12 + eps64 * |f(x)| / step` is the smallest slope the f64
/// difference quotient can resolve.
pub fn grad_check<F: ScalarFn>(f: &F, point: &[f64], cfg: &GradCheckConfig) -> GradCheckReport {
    assert_eq!(point.len(), f.dim(), "point dimension");
    let x: Vec<f64> = match cfg.precision {
        // The single-precision tape sees the point rounded to f32; the
        // oracle must differentiate at the same point.
        Precision::Single => point.iter().map(|v| *v as f32 as f64).collect(),
        Precision::Double => point.to_vec(),
    };
    let (value, ad, pattern) = match cfg.precision {
        Precision::Single => evaluate::<f32, F>(f, &x, true),
        Precision::Double => evaluate::<f64, F>(f, &x, true),
    };
    let ad = ad.unwrap();
    let resolution = 1e-12 + f64::EPSILON * value.abs() / cfg.step;
    let coords: Vec<usize> = match cfg.coords {
        Some(n) if n < x.len() => {
            let mut idx = sample(&mut seeded_rng(cfg.seed), x.len(), n).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..x.len()).collect(),
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for k in coords {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += cfg.step;
        xm[k] -= cfg.step;
        let (fp, _, pp) = evaluate::<f64, F>(f, &xp, false);
        let (fm, _, pm) = evaluate::<f64, F>(f, &xm, false);
        if pp != pattern || pm != pattern {
            report.skipped += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * cfg.step);
        let err = (ad[k] - fd).abs() / (ad[k].abs() + fd.abs() + resolution);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(k);
        }
    }
    report
}
