use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Provenance, SliceImage};
use crate::error::{Error, Result};
use crate::geom3d::seeded_rng;

/// Appearance change between acquisition sources. Geometry is untouched.
/// Omitted fields take their identity values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShiftSpec {
    pub gamma: f64,
    /// Multiplicative speckle standard deviation.
    pub speckle_sigma: f64,
    pub additive_sigma: f64,
    pub scale: f64,
    pub seed: u64,
}

impl Default for DomainShiftSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl DomainShiftSpec {
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            speckle_sigma: 0.0,
            additive_sigma: 0.0,
            scale: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma must be > 0"));
        }
        if !(self.speckle_sigma >= 0.0 && self.additive_sigma >= 0.0) {
            return Err(Error::invalid("noise sigmas must be >= 0"));
        }
        if !self.scale.is_finite() {
            return Err(Error::NonFinite("shift scale".into()));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// `out = clamp(scale * img^gamma * (1 + speckle) + additive, 0, 1)`,
/// speckle and additive noise Gaussian. The plane location is preserved.
pub fn apply_domain_shift(img: &SliceImage, spec: &DomainShiftSpec) -> Result<SliceImage> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let pixels = img
        .pixels
        .iter()
        .map(|&p| {
            let mut v = spec.scale * (p.max(0.0) as f64).powf(spec.gamma);
            if spec.speckle_sigma > 0.0 {
                let n: f64 = StandardNormal.sample(&mut rng);
                v *= 1.0 + spec.speckle_sigma * n;
            }
            if spec.additive_sigma > 0.0 {
                let n: f64 = StandardNormal.sample(&mut rng);
                v += spec.additive_sigma * n;
            }
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(SliceImage {
        pixels,
        provenance: Provenance::Target,
        ..img.clone()
    })
}
