use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{query, Field, ImplicitField};
use crate::diffnet::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom3d::{pixel_weights, seeded_rng, subseed, PlaneLocation, Vec3};
use crate::par::Exec;
use crate::volume::SliceImage;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub iters: usize,
    pub lr: f64,
    /// Pixels per optimization step, drawn with replacement.
    pub batch_pixels: usize,
    /// Fixed pixel subset the reported MSE is measured on.
    pub eval_pixels: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iters: 1500,
            lr: 2e-3,
            batch_pixels: 2048,
            eval_pixels: 16384,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub field: ImplicitField,
    /// Minibatch loss of every step.
    pub losses: Vec<f64>,
    pub initial_mse: f64,
    pub final_mse: f64,
}

struct PixelPool {
    points: Vec<Vec3>,
    values: Vec<f32>,
}

fn pixel_pool(slices: &[SliceImage]) -> Result<PixelPool> {
    if slices.is_empty() {
        return Err(Error::Empty("slices to fit".into()));
    }
    let mut points = Vec::new();
    let mut values = Vec::new();
    for s in slices {
        let l = s.require_location()?;
        points.extend(l.pixel_grid(s.height, s.width));
        values.extend_from_slice(&s.pixels);
    }
    Ok(PixelPool { points, values })
}

fn pool_mse(field: &Field, pool: &PixelPool, idx: &[usize], exec: Exec) -> Result<f64> {
    let pts: Vec<Vec3> = idx.iter().map(|&i| pool.points[i]).collect();
    let pred = query(field, &pts, exec)?;
    Ok(pred
        .iter()
        .zip(idx)
        .map(|(p, &i)| (p - pool.values[i] as f64).powi(2))
        .sum::<f64>()
        / idx.len() as f64)
}

/// Minimizes pixel MSE between the field at each pixel's atlas position and
/// the pixel intensity, by ADAM on minibatches of pixels.
pub fn fit(
    field: ImplicitField,
    slices: &[SliceImage],
    cfg: &FitConfig,
    exec: Exec,
) -> Result<FitOutcome> {
    let pool = pixel_pool(slices)?;
    if cfg.batch_pixels == 0 {
        return Err(Error::invalid("batch_pixels must be >= 1"));
    }
    let n = pool.points.len();
    let mut rng = seeded_rng(subseed(cfg.seed, 0xE7A1));
    let eval: Vec<usize> = if cfg.eval_pixels >= n {
        (0..n).collect()
    } else {
        (0..cfg.eval_pixels)
            .map(|_| rng.random_range(0..n))
            .collect()
    };
    let mut field = Field::Neural(field);
    let initial_mse = pool_mse(&field, &pool, &eval, exec)?;
    let mut adam = AdamState::<f32>::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut losses = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let mut rng = seeded_rng(subseed(cfg.seed, it as u64));
        let idx: Vec<usize> = (0..cfg.batch_pixels)
            .map(|_| rng.random_range(0..n))
            .collect();
        let pts: Vec<f32> = idx
            .iter()
            .flat_map(|&i| {
                let p = pool.points[i];
                [p.x as f32, p.y as f32, p.z as f32]
            })
            .collect();
        let tgt: Vec<f32> = idx.iter().map(|&i| pool.values[i]).collect();
        let Field::Neural(f) = &mut field else {
            unreachable!()
        };
        let mut tape = Tape::<f32>::new();
        let vars = f.bind(&mut tape, true);
        let x = tape.constant(Tensor::new(&[idx.len(), 3], pts));
        let y = f.record(&mut tape, &vars, x);
        let t = tape.constant(Tensor::new(&[idx.len(), 1], tgt));
        let loss = tape.mse(y, t);
        let l = tape.scalar(loss) as f64;
        if !l.is_finite() {
            return Err(Error::Diverged {
                step: it,
                detail: format!("fit loss = {l}"),
            });
        }
        losses.push(l);
        let grads = tape.backward(loss);
        let g: Vec<Option<&[f32]>> = vars.iter().map(|v| grads.get(*v)).collect();
        let mut slots: Vec<&mut [f32]> = f
            .layers_mut()
            .iter_mut()
            .map(|l| l.tensor.data_mut())
            .collect();
        adam.update(&mut slots, &g).map_err(|e| Error::Diverged {
            step: it,
            detail: e.to_string(),
        })?;
    }
    let final_mse = if cfg.iters == 0 {
        initial_mse
    } else {
        pool_mse(&field, &pool, &eval, exec)?
    };
    let Field::Neural(field) = field else {
        unreachable!()
    };
    Ok(FitOutcome {
        field,
        losses,
        initial_mse,
        final_mse,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub iters: usize,
    pub lr_pose: f64,
    /// Zero keeps the field frozen.
    pub lr_field: f64,
    pub pixels_per_slice: usize,
    /// Abort when the loss exceeds this multiple of the first step's loss
    /// (floored at 1e-4).
    pub divergence_factor: f64,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iters: 300,
            lr_pose: 0.05,
            lr_field: 0.0,
            pixels_per_slice: 512,
            divergence_factor: 5.0,
            seed: 0,
        }
    }
}

/// Reference loss floor for the divergence test. Intensities live in
/// [0, 1], so an MSE below 1% RMS error is never treated as divergence,
/// even when the start is already aligned.
const DIVERGENCE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub poses: Vec<PlaneLocation>,
    pub field: Field,
    pub losses: Vec<f64>,
}

/// Joint gradient descent on every slice's anchor matrix (and on the field
/// when `lr_field > 0`). Anchors enter through the pixel-to-world map,
/// which is linear in them, so each pixel's atlas point is a fixed
/// barycentric combination of TL, TR and BR.
pub fn refine_poses(
    field: Field,
    slices: &[SliceImage],
    cfg: &RefineConfig,
) -> Result<RefineOutcome> {
    if slices.is_empty() {
        return Err(Error::Empty("slices to refine".into()));
    }
    if cfg.pixels_per_slice == 0 {
        return Err(Error::invalid("pixels_per_slice must be >= 1"));
    }
    let mut anchors: Vec<Vec<f64>> = slices
        .iter()
        .map(|s| Ok(s.require_location()?.to_flat().to_vec()))
        .collect::<Result<_>>()?;
    let weights: Vec<Vec<[f64; 3]>> = slices
        .iter()
        .map(|s| pixel_weights(s.height, s.width))
        .collect();
    let mut field = field;
    let train_field = cfg.lr_field > 0.0 && matches!(field, Field::Neural(_));
    let mut pose_adam = AdamState::<f64>::new(AdamConfig {
        lr: cfg.lr_pose,
        ..AdamConfig::default()
    });
    let mut field_adam = AdamState::<f32>::new(AdamConfig {
        lr: cfg.lr_field,
        ..AdamConfig::default()
    });
    let mut losses = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let mut rng = seeded_rng(subseed(cfg.seed, it as u64));
        let mut tape = Tape::<f64>::new();
        let pose_vars: Vec<Var> = anchors
            .iter()
            .map(|a| tape.param(Tensor::new(&[3, 3], a.clone())))
            .collect();
        let field_vars = field.bind(&mut tape, train_field);
        let mut pts = Vec::with_capacity(slices.len());
        let mut tgt = Vec::with_capacity(slices.len() * cfg.pixels_per_slice);
        for (s, (w, pv)) in slices.iter().zip(weights.iter().zip(&pose_vars)) {
            let idx: Vec<usize> = (0..cfg.pixels_per_slice)
                .map(|_| rng.random_range(0..w.len()))
                .collect();
            let wm: Vec<f64> = idx.iter().flat_map(|&i| w[i]).collect();
            tgt.extend(idx.iter().map(|&i| s.pixels[i] as f64));
            pts.push(tape.matmul_const(Tensor::new(&[idx.len(), 3], wm), *pv));
        }
        let p = tape.concat_rows(&pts);
        let y = field.record(&mut tape, &field_vars, p);
        let t = tape.constant(Tensor::new(&[tgt.len(), 1], tgt));
        let loss = tape.mse(y, t);
        let l = tape.scalar(loss);
        let diverged = !l.is_finite()
            || losses
                .first()
                .is_some_and(|l0: &f64| l > cfg.divergence_factor * l0.max(DIVERGENCE_FLOOR));
        if diverged {
            return Err(Error::Diverged {
                step: it,
                detail: format!(
                    "pose refinement loss {l:e} vs initial {:e}",
                    losses.first().copied().unwrap_or(f64::NAN)
                ),
            });
        }
        losses.push(l);
        let grads = tape.backward(loss);
        let g: Vec<Option<&[f64]>> = pose_vars.iter().map(|v| grads.get(*v)).collect();
        let mut slots: Vec<&mut [f64]> = anchors.iter_mut().map(|a| a.as_mut_slice()).collect();
        pose_adam.update(&mut slots, &g)?;
        if train_field {
            if let Field::Neural(f) = &mut field {
                let gf: Vec<Vec<f32>> = field_vars
                    .iter()
                    .zip(f.layers())
                    .map(|(v, l)| {
                        grads
                            .get_or_zeros(*v, l.tensor.len())
                            .iter()
                            .map(|x| *x as f32)
                            .collect()
                    })
                    .collect();
                let gr: Vec<Option<&[f32]>> = gf.iter().map(|g| Some(g.as_slice())).collect();
                let mut fs: Vec<&mut [f32]> = f
                    .layers_mut()
                    .iter_mut()
                    .map(|l| l.tensor.data_mut())
                    .collect();
                field_adam.update(&mut fs, &gr)?;
            }
        }
    }
    let poses = anchors
        .iter()
        .map(|a| PlaneLocation::from_flat(a))
        .collect::<Result<Vec<_>>>()?;
    Ok(RefineOutcome {
        poses,
        field,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{grad_check, GradCheckConfig, Precision, Real, ScalarFn};
    use crate::geom3d::{anchor_distance, random_unit_vector};
    use crate::implicit::{Domain, FieldConfig, VolumeField};
    use crate::volume::{extract_slice, gen_phantom, Dims, PhantomSpec};

    fn planes() -> Vec<PlaneLocation> {
        vec![
            PlaneLocation::new([[2.0, 2.0, 5.0], [13.0, 2.0, 5.0], [13.0, 13.0, 5.0]]).unwrap(),
            PlaneLocation::new([[2.0, 7.0, 2.0], [13.0, 7.0, 2.0], [13.0, 7.0, 13.0]]).unwrap(),
            PlaneLocation::new([[3.0, 2.0, 2.0], [12.0, 3.0, 12.0], [12.0, 13.0, 12.0]]).unwrap(),
        ]
    }

    #[test]
    fn constant_slices_fit_to_constant() {
        let slices: Vec<_> = planes()
            .into_iter()
            .map(|p| SliceImage::constant(8, 8, 0.5).with_location(p))
            .collect();
        let dom = Domain::covering(&slices, 1.0).unwrap();
        let f = ImplicitField::init(FieldConfig::default(), dom, 1).unwrap();
        let cfg = FitConfig {
            iters: 300,
            lr: 3e-3,
            batch_pixels: 128,
            ..FitConfig::default()
        };
        let out = fit(f, &slices, &cfg, Exec::Sequential).unwrap();
        let pts: Vec<Vec3> = slices
            .iter()
            .flat_map(|s| s.location.unwrap().pixel_grid(8, 8))
            .collect();
        let v = query(&Field::Neural(out.field), &pts, Exec::Sequential).unwrap();
        assert!(
            v.iter().all(|x| (x - 0.5).abs() <= 0.02),
            "max dev {}",
            v.iter().map(|x| (x - 0.5).abs()).fold(0.0, f64::max)
        );
        assert!(out.losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn zero_iterations_is_identity() {
        let slices = vec![SliceImage::constant(4, 4, 0.1).with_location(planes()[0])];
        let f = ImplicitField::init(
            FieldConfig::default(),
            Domain::covering(&slices, 1.0).unwrap(),
            2,
        )
        .unwrap();
        let out = fit(
            f.clone(),
            &slices,
            &FitConfig {
                iters: 0,
                ..FitConfig::default()
            },
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(out.field, f);
        assert_eq!(out.initial_mse, out.final_mse);
        assert!(fit(f, &[], &FitConfig::default(), Exec::Sequential).is_err());
    }

    #[test]
    fn lr_zero_field_fit_changes_nothing() {
        let slices = vec![SliceImage::constant(4, 4, 0.1).with_location(planes()[0])];
        let f = ImplicitField::init(
            FieldConfig::default(),
            Domain::covering(&slices, 1.0).unwrap(),
            2,
        )
        .unwrap();
        let out = fit(
            f.clone(),
            &slices,
            &FitConfig {
                iters: 5,
                lr: 0.0,
                ..FitConfig::default()
            },
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(out.field, f);
    }

    fn phantom_slices() -> (VolumeField, Vec<SliceImage>) {
        let v = gen_phantom(&PhantomSpec::asymmetric(3), Dims::cube(16)).unwrap();
        let slices = planes()
            .iter()
            .map(|p| extract_slice(&v, p, 24, 24).unwrap())
            .collect();
        (VolumeField::new(v), slices)
    }

    #[test]
    fn zero_pose_lr_keeps_anchors() {
        let (vf, slices) = phantom_slices();
        let cfg = RefineConfig {
            iters: 5,
            lr_pose: 0.0,
            ..RefineConfig::default()
        };
        let out = refine_poses(vf.into(), &slices, &cfg).unwrap();
        for (p, s) in out.poses.iter().zip(&slices) {
            assert_eq!(p, s.location.as_ref().unwrap());
        }
    }

    #[test]
    fn true_field_pulls_offset_single_slice_back() {
        let (vf, slices) = phantom_slices();
        let truth = slices[0].location.unwrap();
        let mut rng = seeded_rng(4);
        let mut noisy = slices[0].clone();
        let off: Vec<f64> = (0..3)
            .flat_map(|_| (random_unit_vector(&mut rng) * 2.0).as_slice().to_vec())
            .collect();
        let flat: Vec<f64> = truth
            .to_flat()
            .iter()
            .zip(&off)
            .map(|(a, b)| a + b)
            .collect();
        noisy.location = Some(PlaneLocation::from_flat(&flat).unwrap());
        let before = anchor_distance(noisy.location.as_ref().unwrap(), &truth);
        let cfg = RefineConfig {
            iters: 200,
            ..RefineConfig::default()
        };
        let out = refine_poses(vf.into(), &[noisy], &cfg).unwrap();
        let after = anchor_distance(&out.poses[0], &truth);
        assert!((before - 2.0).abs() < 1e-9);
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn true_poses_are_stationary() {
        let (vf, slices) = phantom_slices();
        let cfg = RefineConfig {
            iters: 100,
            ..RefineConfig::default()
        };
        let out = refine_poses(vf.into(), &slices, &cfg).unwrap();
        for (p, s) in out.poses.iter().zip(&slices) {
            let d = anchor_distance(p, s.location.as_ref().unwrap());
            assert!(d < 0.5, "moved {d}");
        }
    }

    struct FitLoss {
        field: ImplicitField,
        points: Vec<f64>,
        targets: Vec<f64>,
    }

    impl ScalarFn for FitLoss {
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

    #[test]
    fn fit_loss_gradient_single_precision() {
        let dom = Domain::new([0.0; 3], [16.0; 3]).unwrap();
        let f = ImplicitField::init(
            FieldConfig {
                octaves: 2,
                hidden: 5,
            },
            dom,
            3,
        )
        .unwrap();
        let point: Vec<f64> = f.flat().iter().map(|v| *v as f64).collect();
        let loss = FitLoss {
            field: f,
            points: vec![1.3, 2.2, 3.7, 8.1, 8.6, 9.3, 13.9, 3.4, 6.2, 5.7, 12.1, 0.9],
            targets: vec![0.2, 0.9, 0.4, 0.6],
        };
        let r = grad_check(&loss, &point, &GradCheckConfig::new(Precision::Single));
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }
}
