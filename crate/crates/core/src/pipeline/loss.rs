use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{augment, AugmentSpec, Bound, ModelParams, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom3d::{displacement, PlaneLocation};
use crate::volume::SliceImage;

/// Augmented `(image_i, image_k)` views of every link of a cycle, and the
/// known displacement between its two endpoints.
pub type LinkCycle = (Vec<(SliceImage, SliceImage)>, [f64; 9]);

/// Weights of the supervised objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_l: f64,
    pub w_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_l: 1.0, w_d: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CycleConfig {
    pub w_c: f64,
    /// Target images between the two source slices of a cycle.
    pub length: usize,
    /// Cycles per fine-tuning step.
    pub cycles_per_step: usize,
    /// Source-only steps per step that also carries cycles; 1 means every
    /// step mixes one source batch with one cycle batch.
    pub source_batches_per_cycle_batch: usize,
    /// Appearance augmentation applied independently to every link view.
    /// Agreement between two views of the same target image is the only
    /// part of the cycle signal that does not telescope away, so this is
    /// where invariance to acquisition appearance is learned.
    pub augment: AugmentSpec,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            w_c: 1.0,
            length: 3,
            cycles_per_step: 4,
            source_batches_per_cycle_batch: 1,
            augment: AugmentSpec {
                contrast: (0.9, 1.1),
                gamma: (2.0 / 3.0, 1.5),
                noise_sigma: 0.1,
                ..AugmentSpec::identity()
            },
        }
    }
}

impl CycleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::invalid("cycle length must be >= 1"));
        }
        if !(self.w_c >= 0.0 && self.w_c.is_finite()) {
            return Err(Error::invalid("w_c must be >= 0"));
        }
        if self.cycles_per_step == 0 || self.source_batches_per_cycle_batch == 0 {
            return Err(Error::invalid(
                "cycles_per_step and the mix ratio must be >= 1",
            ));
        }
        self.augment.validate()
    }
}

/// One cycle `S_i -> I_1 -> ... -> I_m -> S_k`. Link `j` joins node `j` and
/// node `j + 1`; each end of each link is an independently augmented view.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleBatch {
    pub source_i: SliceImage,
    pub source_k: SliceImage,
    pub targets: Vec<SliceImage>,
    /// `(left, right)` augmentation draws for every link.
    pub link_draws: Vec<(u64, u64)>,
    pub source_indices: (usize, usize),
    pub target_indices: Vec<usize>,
}

impl CycleBatch {
    pub fn links(&self) -> usize {
        self.targets.len() + 1
    }

    fn node(&self, j: usize) -> &SliceImage {
        if j == 0 {
            &self.source_i
        } else if j <= self.targets.len() {
            &self.targets[j - 1]
        } else {
            &self.source_k
        }
    }

    /// Ground-truth `D_ik` from the two labeled ends.
    pub fn target_displacement(&self) -> Result<[f64; 9]> {
        let li = self.source_i.require_location()?;
        let lk = self.source_k.require_location()?;
        Ok(displacement(li, lk).to_flat())
    }

    /// Augmented `(left, right)` views of every link.
    pub fn link_views(&self, spec: &AugmentSpec) -> Result<Vec<(SliceImage, SliceImage)>> {
        (0..self.links())
            .map(|j| {
                let (a, b) = self.link_draws[j];
                Ok((
                    augment(self.node(j), spec, a)?,
                    augment(self.node(j + 1), spec, b)?,
                ))
            })
            .collect()
    }
}

/// Draws one cycle: source ends uniform over the labeled pool (distinct
/// when possible), `length` targets without replacement when the pool
/// allows, and fresh augmentation draws for every link end.
pub fn build_cycle(
    source: &[SliceImage],
    targets: &[SliceImage],
    cfg: &CycleConfig,
    rng: &mut impl Rng,
) -> Result<CycleBatch> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Empty("source pool".into()));
    }
    if targets.is_empty() {
        return Err(Error::Empty("target pool".into()));
    }
    let (i, k) = if source.len() >= 2 {
        let idx = sample(rng, source.len(), 2);
        (idx.index(0), idx.index(1))
    } else {
        (0, 0)
    };
    for s in [i, k] {
        source[s].require_location()?;
    }
    let target_indices: Vec<usize> = if targets.len() >= cfg.length {
        sample(rng, targets.len(), cfg.length).into_vec()
    } else {
        (0..cfg.length)
            .map(|_| rng.random_range(0..targets.len()))
            .collect()
    };
    let link_draws = (0..=cfg.length)
        .map(|_| (rng.random(), rng.random()))
        .collect();
    Ok(CycleBatch {
        source_i: source[i].clone(),
        source_k: source[k].clone(),
        targets: target_indices.iter().map(|&t| targets[t].clone()).collect(),
        link_draws,
        source_indices: (i, k),
        target_indices,
    })
}

/// Loss nodes of one supervised evaluation.
#[derive(Clone, Copy, Debug)]
pub struct TrainingLoss {
    pub total: Var,
    pub location: Var,
    pub displacement: Var,
}

fn label_rows<T: Real>(locs: &[&PlaneLocation]) -> Tensor<T> {
    let data: Vec<f64> = locs.iter().flat_map(|l| l.to_flat()).collect();
    Tensor::from_f64(&[locs.len(), 9], &data)
}

/// `l_t = w_L * MSE(L_hat, L) + w_D * MSE(D_hat, D)`, with `D` over the
/// adjacent pairs `(j, j + 1)` of the batch.
pub fn training_loss<T: Real>(
    model: &ModelParams,
    tape: &mut Tape<T>,
    bound: &Bound,
    batch: &[&SliceImage],
    w: &LossWeights,
) -> Result<TrainingLoss> {
    if batch.len() < 2 {
        return Err(Error::invalid("training batch needs at least 2 slices"));
    }
    let locs = batch
        .iter()
        .map(|s| s.require_location())
        .collect::<Result<Vec<_>>>()?;
    let n = batch.len();
    let feats = model.encode(tape, bound, batch)?;
    let l_hat = model.predict_location(tape, bound, feats);
    let l_true = tape.constant(label_rows(&locs));
    let location = tape.mse(l_hat, l_true);

    let fi = tape.rows(feats, 0, n - 1);
    let fk = tape.rows(feats, 1, n - 1);
    let d_hat = model.predict_displacement(tape, bound, fi, fk);
    let d_true: Vec<f64> = (0..n - 1)
        .flat_map(|j| displacement(locs[j], locs[j + 1]).to_flat())
        .collect();
    let d_true = tape.constant(Tensor::from_f64(&[n - 1, 9], &d_true));
    let disp = tape.mse(d_hat, d_true);

    let total = tape.weighted_sum(&[(location, T::from_f64(w.w_l)), (disp, T::from_f64(w.w_d))]);
    Ok(TrainingLoss {
        total,
        location,
        displacement: disp,
    })
}

/// `l_c = MSE(sum of predicted link displacements, D_ik)`, averaged over
/// the given cycles. Views are taken as already augmented, one pair per
/// link in cycle order.
pub fn cycle_loss<T: Real>(
    model: &ModelParams,
    tape: &mut Tape<T>,
    bound: &Bound,
    cycles: &[LinkCycle],
) -> Result<Var> {
    if cycles.is_empty() {
        return Err(Error::Empty("cycle batch".into()));
    }
    let mut sums = Vec::with_capacity(cycles.len());
    let mut truth = Vec::with_capacity(9 * cycles.len());
    for (views, d_ik) in cycles {
        if views.is_empty() {
            return Err(Error::Empty("cycle links".into()));
        }
        let mut imgs = Vec::with_capacity(2 * views.len());
        for (a, b) in views {
            imgs.push(a);
            imgs.push(b);
        }
        let feats = model.encode(tape, bound, &imgs)?;
        let links: Vec<Var> = (0..views.len())
            .map(|j| {
                let fi = tape.rows(feats, 2 * j, 1);
                let fk = tape.rows(feats, 2 * j + 1, 1);
                model.predict_displacement(tape, bound, fi, fk)
            })
            .collect();
        sums.push(tape.sum_all(&links));
        truth.extend_from_slice(d_ik);
    }
    let composed = tape.concat_rows(&sums);
    let truth = tape.constant(Tensor::from_f64(&[cycles.len(), 9], &truth));
    Ok(tape.mse(composed, truth))
}

/// `l_f = w_c * l_c + l_t`.
pub fn finetune_loss<T: Real>(tape: &mut Tape<T>, l_c: Var, l_t: Var, w_c: f64) -> Var {
    tape.weighted_sum(&[(l_c, T::from_f64(w_c)), (l_t, T::ONE)])
}

/// [`cycle_loss`] of precomputed link displacement rows, outside any tape.
pub fn composed_cycle_error(links: &[[f64; 9]], d_ik: &[f64; 9]) -> f64 {
    let mut acc = [0.0; 9];
    for l in links {
        for k in 0..9 {
            acc[k] += l[k];
        }
    }
    acc.iter()
        .zip(d_ik)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / 9.0
}
