use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::{seeded_rng, subseed, PlaneLocation};
use crate::volume::SliceImage;

/// Random training-time perturbation of a slice.
///
/// Scaling (zoom about the image center) and in-plane translation resample
/// the pixels and move the location label with them, so a labeled slice
/// stays exactly labeled. Gamma, contrast gain and additive noise change
/// only appearance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub scale: (f64, f64),
    /// Maximum absolute shift per axis, pixels.
    pub translate_px: f64,
    pub contrast: (f64, f64),
    /// Intensity exponent range, drawn log-uniformly.
    pub gamma: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            scale: (1.0, 1.0),
            translate_px: 0.0,
            contrast: (1.0, 1.0),
            gamma: (1.0, 1.0),
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    /// The same spec with geometric ranges collapsed to the identity.
    pub fn appearance_only(self) -> Self {
        Self {
            scale: (1.0, 1.0),
            translate_px: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok =
            |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi;
        if !range_ok(self.scale) || !range_ok(self.contrast) || !range_ok(self.gamma) {
            return Err(Error::invalid(
                "scale, contrast and gamma ranges need 0 < lo <= hi",
            ));
        }
        if !(self.translate_px >= 0.0 && self.translate_px.is_finite()) {
            return Err(Error::invalid("translate_px must be >= 0"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        Ok(())
    }

    fn is_geometric(&self) -> bool {
        self.scale != (1.0, 1.0) || self.translate_px > 0.0
    }
}

fn draw_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Applies one random draw of `spec`; `draw` selects an independent
/// sub-stream of `spec.seed`.
pub fn augment(img: &SliceImage, spec: &AugmentSpec, draw: u64) -> Result<SliceImage> {
    spec.validate()?;
    let mut rng = seeded_rng(subseed(spec.seed, draw));
    let mut out = if spec.is_geometric() {
        let s = draw_range(&mut rng, spec.scale);
        let t = spec.translate_px;
        let (tu, tv) = if t > 0.0 {
            (rng.random_range(-t..=t), rng.random_range(-t..=t))
        } else {
            (0.0, 0.0)
        };
        warp(img, s, tu, tv)?
    } else {
        img.clone()
    };
    let gain = draw_range(&mut rng, spec.contrast) as f32;
    let gamma = draw_range(&mut rng, (spec.gamma.0.ln(), spec.gamma.1.ln())).exp() as f32;
    let sigma = spec.noise_sigma;
    if gain != 1.0 || gamma != 1.0 || sigma > 0.0 {
        for p in &mut out.pixels {
            let mut v = if gamma == 1.0 {
                *p
            } else {
                p.max(0.0).powf(gamma)
            } * gain;
            if sigma > 0.0 {
                let n: f64 = StandardNormal.sample(&mut rng);
                v += (sigma * n) as f32;
            }
            *p = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Output pixel `q` samples the input at `c + (q - c) / s - t`, where `c`
/// is the image center, bilinearly with zero fill.
fn warp(img: &SliceImage, s: f64, tu: f64, tv: f64) -> Result<SliceImage> {
    let (h, w) = (img.height, img.width);
    let cu = (w - 1) as f64 / 2.0;
    let cv = (h - 1) as f64 / 2.0;
    let src = |u: f64, v: f64| (cu + (u - cu) / s - tu, cv + (v - cv) / s - tv);
    let mut pixels = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            let (x, y) = src(u as f64, v as f64);
            pixels.push(bilinear(img, x, y));
        }
    }
    let mut out = SliceImage::new(h, w, img.spacing / s, pixels)?;
    out.provenance = img.provenance;
    if let Some(loc) = &img.location {
        let at = |u: f64, v: f64| {
            let (x, y) = src(u, v);
            loc.pixel_to_world(x, y, h, w)
        };
        let (wl, hl) = ((w - 1) as f64, (h - 1) as f64);
        out.location = Some(PlaneLocation::from_corners(
            at(0.0, 0.0),
            at(wl, 0.0),
            at(wl, hl),
        )?);
    }
    Ok(out)
}

fn bilinear(img: &SliceImage, x: f64, y: f64) -> f32 {
    let (w, h) = (img.width as f64, img.height as f64);
    if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
        return 0.0;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let p = |u: usize, v: usize| img.at(u, v) as f64;
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}
