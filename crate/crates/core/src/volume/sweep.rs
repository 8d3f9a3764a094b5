use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{extract_slice, SliceImage, Volume};
use crate::error::{Error, Result};
use crate::geom3d::{
    anchor_distance, axis_rotation, fibonacci_sphere, random_unit_vector, sample_pose, seeded_rng,
    PlaneLocation, PoseSampling,
};

/// A freehand-like sequence of slices whose poses change smoothly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub frames: usize,
    /// Upper bound on the anchor distance between consecutive frames.
    pub smoothness: f64,
    pub seed: u64,
    pub sampling: PoseSampling,
}

/// Rigid random walk: each step rotates the plane about its center and
/// translates it, with the total anchor motion bounded by `smoothness`.
/// The walk drifts back toward the sampling center whenever it leaves the
/// offset ball.
pub fn simulate_sweep(v: &Volume, spec: &SweepSpec) -> Result<Vec<SliceImage>> {
    sweep_planes(spec)?
        .iter()
        .map(|p| {
            extract_slice(
                v,
                p,
                spec.sampling.extent.height,
                spec.sampling.extent.width,
            )
        })
        .collect()
}

pub(crate) fn sweep_planes(spec: &SweepSpec) -> Result<Vec<PlaneLocation>> {
    if spec.frames < 2 {
        return Err(Error::invalid("a sweep needs at least 2 frames"));
    }
    if !(spec.smoothness >= 0.0 && spec.smoothness.is_finite()) {
        return Err(Error::invalid("smoothness must be >= 0"));
    }
    let mut rng = seeded_rng(spec.seed);
    let dirs = fibonacci_sphere(256, Some(spec.seed ^ 0x5357))?;
    let mut plane = sample_pose(&dirs, &mut rng, &spec.sampling)?;
    let center = spec.sampling.center();
    let mut out = Vec::with_capacity(spec.frames);
    out.push(plane);
    for _ in 1..spec.frames {
        if spec.smoothness == 0.0 {
            out.push(plane);
            continue;
        }
        let pivot = plane.center();
        let reach = (0..3)
            .map(|r| (plane.anchor(r) - pivot).norm())
            .fold(0.0, f64::max)
            .max(1e-9);
        let budget = spec.smoothness * rng.random_range(0.5..1.0);
        let split: f64 = rng.random_range(0.2..0.8);
        let angle = budget * (1.0 - split) / reach;
        let mut dir = random_unit_vector(&mut rng);
        let drift = pivot - center;
        if drift.norm() > spec.sampling.offset_radius.max(1e-9) {
            dir = (-drift.normalize() + dir * 0.5).normalize();
        }
        let rot = axis_rotation(&random_unit_vector(&mut rng), angle);
        let next = plane
            .rotated_about(&rot, &pivot)
            .translated(&(dir * (budget * split)));
        debug_assert!(anchor_distance(&plane, &next) <= spec.smoothness + 1e-9);
        plane = next;
        out.push(plane);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3d::SliceExtent;
    use crate::volume::{gen_phantom, Dims, PhantomSpec};

    fn spec(smoothness: f64) -> SweepSpec {
        SweepSpec {
            frames: 30,
            smoothness,
            seed: 5,
            sampling: PoseSampling {
                extent: SliceExtent::new(16, 16, 1.0).unwrap(),
                center: [7.5; 3],
                offset_radius: 2.0,
            },
        }
    }

    #[test]
    fn zero_smoothness_freezes_frames() {
        let v = gen_phantom(&PhantomSpec::asymmetric(1), Dims::cube(16)).unwrap();
        let frames = simulate_sweep(&v, &spec(0.0)).unwrap();
        assert!(frames.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn consecutive_motion_is_bounded_and_rigid() {
        let s = spec(0.7);
        let planes = sweep_planes(&s).unwrap();
        let (w0, h0) = planes[0].edges();
        for w in planes.windows(2) {
            let d = anchor_distance(&w[0], &w[1]);
            assert!(d <= 0.7 + 1e-12 && d > 0.0);
            let (ew, eh) = w[1].edges();
            assert!((ew.norm() - w0.norm()).abs() < 1e-9 && (eh.norm() - h0.norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn replay_is_identical() {
        let v = gen_phantom(&PhantomSpec::asymmetric(1), Dims::cube(16)).unwrap();
        assert_eq!(
            simulate_sweep(&v, &spec(0.5)).unwrap(),
            simulate_sweep(&v, &spec(0.5)).unwrap()
        );
    }

    #[test]
    fn needs_two_frames() {
        let mut s = spec(0.5);
        s.frames = 1;
        assert!(sweep_planes(&s).is_err());
    }
}
