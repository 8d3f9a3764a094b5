//! Synthetic phantoms standing in for aligned training volumes.
//!
//! Primitives are placed in the unit cube, which maps onto the volume as
//! `q = (x/(W-1), y/(H-1), z/(D-1))`. They are painted in order: solids
//! overwrite, textures modulate whatever tissue is already present.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dims, Volume};
use crate::error::{Error, Result};
use crate::geom3d::{seeded_rng, subseed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    /// Axis-aligned solid ellipsoid.
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
        intensity: f64,
    },
    /// Spherical shells around `center`, each `thickness` wide.
    Shells {
        center: [f64; 3],
        radii: Vec<f64>,
        thickness: f64,
        intensity: f64,
    },
    /// Adds `amplitude * sin(2 pi f.q + phase)` to nonzero voxels.
    Texture {
        frequency: [f64; 3],
        phase: f64,
        amplitude: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    /// Standard deviation of additive Gaussian voxel noise.
    #[serde(default)]
    pub noise: f64,
}

impl PhantomSpec {
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            primitives: Vec::new(),
            noise: 0.0,
        }
    }

    /// Head-like phantom with off-center inclusions; jittered by `seed`.
    /// No axis-aligned reflection through the center maps it onto itself.
    pub fn asymmetric(seed: u64) -> Self {
        let mut rng = seeded_rng(subseed(seed, 0x5048));
        let mut jit = |c: [f64; 3], amount: f64| -> [f64; 3] {
            std::array::from_fn(|a| c[a] + rng.random_range(-amount..amount))
        };
        let primitives = vec![
            Primitive::Ellipsoid {
                center: [0.5, 0.5, 0.5],
                radii: [0.44, 0.38, 0.41],
                intensity: 0.3,
            },
            Primitive::Texture {
                frequency: [1.1, 0.6, 0.35],
                phase: 0.4,
                amplitude: 0.12,
            },
            Primitive::Shells {
                center: jit([0.56, 0.46, 0.54], 0.02),
                radii: vec![0.16, 0.27],
                thickness: 0.045,
                intensity: 0.7,
            },
            Primitive::Ellipsoid {
                center: jit([0.33, 0.62, 0.64], 0.02),
                radii: [0.13, 0.08, 0.10],
                intensity: 0.95,
            },
            Primitive::Ellipsoid {
                center: jit([0.66, 0.36, 0.33], 0.02),
                radii: [0.07, 0.16, 0.09],
                intensity: 0.55,
            },
            Primitive::Ellipsoid {
                center: jit([0.42, 0.28, 0.72], 0.02),
                radii: [0.06, 0.06, 0.11],
                intensity: 0.15,
            },
            Primitive::Ellipsoid {
                center: jit([0.72, 0.70, 0.62], 0.02),
                radii: [0.09, 0.05, 0.05],
                intensity: 1.0,
            },
        ];
        Self {
            seed,
            primitives,
            noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_cube = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("phantom noise must be >= 0"));
        }
        for p in &self.primitives {
            match p {
                Primitive::Ellipsoid {
                    center,
                    radii,
                    intensity,
                } => {
                    if !in_cube(center)
                        || radii.iter().any(|r| !(*r > 0.0))
                        || !intensity.is_finite()
                    {
                        return Err(Error::invalid(format!("bad ellipsoid {p:?}")));
                    }
                }
                Primitive::Shells {
                    center,
                    radii,
                    thickness,
                    intensity,
                } => {
                    if !in_cube(center)
                        || radii.iter().any(|r| !(*r > 0.0))
                        || !(*thickness > 0.0)
                        || !intensity.is_finite()
                    {
                        return Err(Error::invalid(format!("bad shells {p:?}")));
                    }
                }
                Primitive::Texture {
                    frequency,
                    phase,
                    amplitude,
                } => {
                    if frequency
                        .iter()
                        .chain([phase, amplitude])
                        .any(|v| !v.is_finite())
                    {
                        return Err(Error::invalid(format!("bad texture {p:?}")));
                    }
                }
            }
        }
        Ok(())
    }
}

fn paint(primitives: &[Primitive], q: [f64; 3]) -> f64 {
    let mut value = 0.0;
    for p in primitives {
        match p {
            Primitive::Ellipsoid {
                center,
                radii,
                intensity,
            } => {
                let r2: f64 = (0..3)
                    .map(|a| ((q[a] - center[a]) / radii[a]).powi(2))
                    .sum();
                if r2 <= 1.0 {
                    value = *intensity;
                }
            }
            Primitive::Shells {
                center,
                radii,
                thickness,
                intensity,
            } => {
                let d = (0..3)
                    .map(|a| (q[a] - center[a]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if radii.iter().any(|r| (d - r).abs() <= 0.5 * thickness) {
                    value = *intensity;
                }
            }
            Primitive::Texture {
                frequency,
                phase,
                amplitude,
            } => {
                if value > 0.0 {
                    let arg: f64 = (0..3).map(|a| frequency[a] * q[a]).sum::<f64>();
                    value += amplitude * (std::f64::consts::TAU * arg + phase).sin();
                }
            }
        }
    }
    value
}

/// Rasterizes `spec` into a single-channel volume with intensities in `[0, 1]`.
pub fn gen_phantom(spec: &PhantomSpec, dims: Dims) -> Result<Volume> {
    if dims.width < 8 || dims.height < 8 || dims.depth < 8 {
        return Err(Error::invalid(format!(
            "phantom dims must be >= 8 per axis, got {dims:?}"
        )));
    }
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = seeded_rng(subseed(spec.seed, 0x4e4f));
    let scale = |n: usize| 1.0 / (n - 1) as f64;
    let (sx, sy, sz) = (scale(dims.width), scale(dims.height), scale(dims.depth));
    let mut data = Vec::with_capacity(dims.voxels().unwrap_or(0));
    for z in 0..dims.depth {
        for y in 0..dims.height {
            for x in 0..dims.width {
                let mut v = paint(
                    &spec.primitives,
                    [x as f64 * sx, y as f64 * sy, z as f64 * sz],
                );
                if spec.noise > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Volume::new(dims, 1, [1.0; 3], data)
}

/// Smallest mean absolute difference between the volume and its mirror
/// image across the three central axis planes. Zero means symmetric.
pub fn mirror_asymmetry(v: &Volume) -> f64 {
    let d = v.dims();
    let n = d.voxels().unwrap_or(1) as f64;
    (0..3)
        .map(|axis| {
            let mut acc = 0.0;
            for z in 0..d.depth {
                for y in 0..d.height {
                    for x in 0..d.width {
                        let (mx, my, mz) = match axis {
                            0 => (d.width - 1 - x, y, z),
                            1 => (x, d.height - 1 - y, z),
                            _ => (x, y, d.depth - 1 - z),
                        };
                        acc += (v.get(x, y, z, 0) - v.get(mx, my, mz, 0)).abs() as f64;
                    }
                }
            }
            acc / n
        })
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_spec_is_all_zero() {
        let v = gen_phantom(&PhantomSpec::empty(3), Dims::cube(8)).unwrap();
        assert!(v.data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let mut spec = PhantomSpec::asymmetric(7);
        spec.noise = 0.05;
        let a = gen_phantom(&spec, Dims::cube(16)).unwrap();
        let b = gen_phantom(&spec, Dims::cube(16)).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = gen_phantom(&PhantomSpec { seed: 8, ..spec }, Dims::cube(16)).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn centered_ellipsoid_indicator() {
        let spec = PhantomSpec {
            seed: 0,
            primitives: vec![Primitive::Ellipsoid {
                center: [0.5, 0.5, 0.5],
                radii: [0.3, 0.2, 0.25],
                intensity: 0.8,
            }],
            noise: 0.0,
        };
        let v = gen_phantom(&spec, Dims::cube(9)).unwrap();
        // voxel 4 is q = 0.5 on every axis: inside; corner q = 0: outside.
        assert_eq!(v.get(4, 4, 4, 0), 0.8);
        assert_eq!(v.get(0, 0, 0, 0), 0.0);
        assert_eq!(v.get(8, 8, 8, 0), 0.0);
    }

    #[test]
    fn intensities_in_unit_range() {
        let mut spec = PhantomSpec::asymmetric(1);
        spec.noise = 0.3;
        let v = gen_phantom(&spec, Dims::cube(12)).unwrap();
        assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn default_phantom_has_no_mirror_symmetry() {
        for seed in 0..4 {
            let v = gen_phantom(&PhantomSpec::asymmetric(seed), Dims::cube(32)).unwrap();
            assert!(
                mirror_asymmetry(&v) > 0.02,
                "seed {seed}: {}",
                mirror_asymmetry(&v)
            );
        }
        let sym = gen_phantom(
            &PhantomSpec {
                seed: 0,
                primitives: vec![Primitive::Ellipsoid {
                    center: [0.5; 3],
                    radii: [0.3; 3],
                    intensity: 1.0,
                }],
                noise: 0.0,
            },
            Dims::cube(16),
        )
        .unwrap();
        assert_eq!(mirror_asymmetry(&sym), 0.0);
    }

    #[test]
    fn small_dims_rejected() {
        assert!(gen_phantom(
            &PhantomSpec::empty(0),
            Dims {
                height: 8,
                width: 7,
                depth: 8
            }
        )
        .is_err());
    }

    #[test]
    fn primitives_outside_cube_rejected() {
        let spec = PhantomSpec {
            seed: 0,
            primitives: vec![Primitive::Ellipsoid {
                center: [1.2, 0.5, 0.5],
                radii: [0.1; 3],
                intensity: 1.0,
            }],
            noise: 0.0,
        };
        assert!(gen_phantom(&spec, Dims::cube(8)).is_err());
    }
}
