//! Localization and sweep-consistency metrics.
//!
//! Per labeled slice: ED (mean anchor distance, voxels) and DA (acute angle
//! between plane normals, radians). Per sweep: the frame-to-frame rate of
//! change `delta_c = ED(P_i, P_i+1) / (1 - NCC(img_i, img_i+1))` and its
//! normalized standard deviation.

use serde::{Deserialize, Serialize};

use crate::diffnet::ModelParams;
use crate::error::{Error, Result};
use crate::geom3d::{anchor_distance, dihedral_angle, PlaneLocation};
use crate::par::Exec;
use crate::pipeline::infer;
use crate::volume::SliceImage;

/// Frame pairs with `NCC >= 1 - DELTA_C_EPS` have no defined rate of change.
pub const DELTA_C_EPS: f64 = 1e-6;

/// Zero-mean, unit-variance normalized cross-correlation.
pub fn ncc(a: &SliceImage, b: &SliceImage) -> Result<f64> {
    if a.extent() != b.extent() {
        return Err(Error::ExtentMismatch {
            expected: a.extent(),
            got: b.extent(),
        });
    }
    let n = a.pixels.len() as f64;
    let mean = |p: &[f32]| p.iter().map(|v| *v as f64).sum::<f64>() / n;
    let (ma, mb) = (mean(&a.pixels), mean(&b.pixels));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.pixels.iter().zip(&b.pixels) {
        let (dx, dy) = (*x as f64 - ma, *y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance("NCC of a constant image".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// `ed / (1 - ncc)`, rejecting `ncc >= 1 - DELTA_C_EPS`.
pub fn delta_c_from(ed: f64, ncc: f64) -> Result<f64> {
    if ncc >= 1.0 - DELTA_C_EPS {
        return Err(Error::DegenerateFramePair(ncc));
    }
    Ok(ed / (1.0 - ncc))
}

pub fn delta_c(
    pred_i: &PlaneLocation,
    pred_next: &PlaneLocation,
    img_i: &SliceImage,
    img_next: &SliceImage,
) -> Result<f64> {
    delta_c_from(anchor_distance(pred_i, pred_next), ncc(img_i, img_next)?)
}

/// Population standard deviation over the mean.
pub fn nstd(series: &[f64]) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::invalid("NSTD needs at least 2 values"));
    }
    let s = Stats::of(series);
    if !(s.mean > 0.0) {
        return Err(Error::invalid(format!(
            "NSTD needs a positive mean, got {}",
            s.mean
        )));
    }
    Ok(s.std / s.mean)
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stats {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetric {
    pub index: usize,
    pub ed: f64,
    pub da: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMetric {
    pub index: usize,
    pub delta_c: Vec<f64>,
    pub nstd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub slices: Vec<SliceMetric>,
    pub ed: Option<Stats>,
    pub da: Option<Stats>,
    pub sweeps: Vec<SweepMetric>,
    pub nstd: Option<Stats>,
    pub config: serde_json::Value,
    pub seed: u64,
}

impl EvalReport {
    /// One row per labeled slice, then one row per sweep frame pair.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,index,frame,ed,da,delta_c\n");
        for s in &self.slices {
            out.push_str(&format!("slice,{},,{},{},\n", s.index, s.ed, s.da));
        }
        for w in &self.sweeps {
            for (f, d) in w.delta_c.iter().enumerate() {
                out.push_str(&format!("sweep,{},{},,,{}\n", w.index, f, d));
            }
        }
        out
    }

    pub fn with_config(mut self, config: serde_json::Value, seed: u64) -> Self {
        self.config = config;
        self.seed = seed;
        self
    }
}

/// A sweep's predicted planes paired with its frames.
pub struct SweepPrediction<'a> {
    pub predictions: &'a [PlaneLocation],
    pub frames: &'a [SliceImage],
}

/// Metrics from predictions already in hand.
pub fn evaluate_predictions(
    predictions: &[PlaneLocation],
    truth: &[PlaneLocation],
    sweeps: &[SweepPrediction],
) -> Result<EvalReport> {
    if predictions.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} labeled slices",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() && sweeps.is_empty() {
        return Err(Error::Empty("nothing to evaluate".into()));
    }
    let slices = predictions
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(index, (p, t))| {
            Ok(SliceMetric {
                index,
                ed: anchor_distance(p, t),
                da: dihedral_angle(p, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sweeps = sweeps
        .iter()
        .enumerate()
        .map(|(index, s)| {
            if s.predictions.len() != s.frames.len() {
                return Err(Error::ShapeMismatch(format!(
                    "sweep {index}: predictions vs frames"
                )));
            }
            let delta_c = (0..s.frames.len().saturating_sub(1))
                .map(|i| {
                    delta_c(
                        &s.predictions[i],
                        &s.predictions[i + 1],
                        &s.frames[i],
                        &s.frames[i + 1],
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepMetric {
                index,
                nstd: nstd(&delta_c)?,
                delta_c,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&SliceMetric) -> f64| {
        (!slices.is_empty()).then(|| Stats::of(&slices.iter().map(f).collect::<Vec<_>>()))
    };
    let nstd =
        (!sweeps.is_empty()).then(|| Stats::of(&sweeps.iter().map(|s| s.nstd).collect::<Vec<_>>()));
    Ok(EvalReport {
        ed: col(|s| s.ed),
        da: col(|s| s.da),
        slices,
        sweeps,
        nstd,
        config: serde_json::Value::Null,
        seed: 0,
    })
}

/// Runs `model` over labeled slices and unlabeled sweeps.
pub fn evaluate(
    model: &ModelParams,
    labeled: &[SliceImage],
    sweeps: &[Vec<SliceImage>],
    exec: Exec,
) -> Result<EvalReport> {
    let truth = labeled
        .iter()
        .map(|s| s.require_location().copied())
        .collect::<Result<Vec<_>>>()?;
    let preds = if labeled.is_empty() {
        Vec::new()
    } else {
        infer(model, labeled, exec)?
    };
    let sweep_preds = sweeps
        .iter()
        .map(|s| infer(model, s, exec))
        .collect::<Result<Vec<_>>>()?;
    let sp: Vec<SweepPrediction> = sweep_preds
        .iter()
        .zip(sweeps)
        .map(|(p, f)| SweepPrediction {
            predictions: p,
            frames: f,
        })
        .collect();
    evaluate_predictions(&preds, &truth, &sp)
}
