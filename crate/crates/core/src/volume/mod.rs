//! Explicit volumes and the slices cut from them.
//!
//! Voxel coordinates `(x, y, z)` index width, height and depth; the atlas
//! frame is the voxel-index frame of the canonical volume. Storage is
//! channel-fastest, then x, then y, then z.

mod io;
mod phantom;
mod shift;
mod sweep;

pub use io::{read_bundle, read_slice, read_volume, write_bundle, write_slice, write_volume};
pub use phantom::{gen_phantom, mirror_asymmetry, PhantomSpec, Primitive};
pub use shift::{apply_domain_shift, DomainShiftSpec};
pub use sweep::{simulate_sweep, SweepSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::{PlaneLocation, Vec3};
use crate::par::{self, Exec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
}

impl Dims {
    pub fn cube(n: usize) -> Self {
        Self {
            height: n,
            width: n,
            depth: n,
        }
    }

    pub fn voxels(&self) -> Option<usize> {
        self.height
            .checked_mul(self.width)
            .and_then(|v| v.checked_mul(self.depth))
    }

    /// Geometric center in voxel coordinates `(x, y, z)`.
    pub fn center(&self) -> Vec3 {
        Vec3::new(
            (self.width as f64 - 1.0) * 0.5,
            (self.height as f64 - 1.0) * 0.5,
            (self.depth as f64 - 1.0) * 0.5,
        )
    }

    /// Upper corner `(W-1, H-1, D-1)`.
    pub fn max_coord(&self) -> Vec3 {
        Vec3::new(
            self.width as f64 - 1.0,
            self.height as f64 - 1.0,
            self.depth as f64 - 1.0,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    channels: usize,
    voxel_size_mm: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: Dims,
        channels: usize,
        voxel_size_mm: [f32; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        let expected = dims
            .voxels()
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::DimensionOverflow(format!("{dims:?} x {channels}")))?;
        if channels == 0 || expected == 0 {
            return Err(Error::invalid(
                "volume must have nonzero extent and channels",
            ));
        }
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "volume data has {} values, dims need {expected}",
                data.len()
            )));
        }
        if voxel_size_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("voxel size must be positive"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume intensities".into()));
        }
        Ok(Self {
            dims,
            channels,
            voxel_size_mm,
            data,
        })
    }

    pub fn zeros(dims: Dims, channels: usize) -> Result<Self> {
        let n = dims
            .voxels()
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::DimensionOverflow(format!("{dims:?}")))?;
        Self::new(dims, channels, [1.0; 3], vec![0.0; n])
    }

    /// Single-channel volume filled from `f(x, y, z)`.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.voxels().unwrap_or(0));
        for z in 0..dims.depth {
            for y in 0..dims.height {
                for x in 0..dims.width {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, 1, [1.0; 3], data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxel_size_mm(&self) -> [f32; 3] {
        self.voxel_size_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, c: usize) -> usize {
        ((z * self.dims.height + y) * self.dims.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f32 {
        self.data[self.index(x, y, z, c)]
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// Trilinear sample of every channel at voxel coordinates `p`.
    /// Points outside `[0, dim-1]` on any axis read as zero.
    pub fn trilinear_sample(&self, p: &Vec3) -> Result<Vec<f64>> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample point".into()));
        }
        Ok((0..self.channels)
            .map(|c| self.sample_channel(p, c))
            .collect())
    }

    /// Trilinear sample of one channel; the caller guarantees a finite `p`.
    #[inline]
    pub fn sample_channel(&self, p: &Vec3, c: usize) -> f64 {
        match self.cell(p) {
            None => 0.0,
            Some(cell) => {
                let mut acc = 0.0;
                for (k, idx) in cell.corners.iter().enumerate() {
                    acc += cell.weight(k) * self.data[idx * self.channels + c] as f64;
                }
                acc
            }
        }
    }

    /// Sample value and its gradient with respect to `p`. Zero outside.
    pub fn sample_with_gradient(&self, p: &Vec3, c: usize) -> (f64, Vec3) {
        let Some(cell) = self.cell(p) else {
            return (0.0, Vec3::zeros());
        };
        let v: [f64; 8] =
            std::array::from_fn(|k| self.data[cell.corners[k] * self.channels + c] as f64);
        let (fx, fy, fz) = (cell.frac[0], cell.frac[1], cell.frac[2]);
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        // corner k: bit0 -> x, bit1 -> y, bit2 -> z
        let x00 = lerp(v[0], v[1], fx);
        let x10 = lerp(v[2], v[3], fx);
        let x01 = lerp(v[4], v[5], fx);
        let x11 = lerp(v[6], v[7], fx);
        let y0 = lerp(x00, x10, fy);
        let y1 = lerp(x01, x11, fy);
        let value = lerp(y0, y1, fz);
        let dz = y1 - y0;
        let dy = lerp(x10 - x00, x11 - x01, fz);
        let dx = lerp(
            lerp(v[1] - v[0], v[3] - v[2], fy),
            lerp(v[5] - v[4], v[7] - v[6], fy),
            fz,
        );
        (value, Vec3::new(dx, dy, dz))
    }

    fn cell(&self, p: &Vec3) -> Option<Cell> {
        let dims = [self.dims.width, self.dims.height, self.dims.depth];
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let x = p[a];
            let max = (dims[a] - 1) as f64;
            if !(x >= 0.0 && x <= max) {
                return None;
            }
            let x0 = x.floor();
            lo[a] = x0 as usize;
            hi[a] = (lo[a] + 1).min(dims[a] - 1);
            frac[a] = x - x0;
        }
        let w = self.dims.width;
        let h = self.dims.height;
        let lin = |x: usize, y: usize, z: usize| (z * h + y) * w + x;
        let corners = std::array::from_fn(|k| {
            let x = if k & 1 == 0 { lo[0] } else { hi[0] };
            let y = if k & 2 == 0 { lo[1] } else { hi[1] };
            let z = if k & 4 == 0 { lo[2] } else { hi[2] };
            lin(x, y, z)
        });
        Some(Cell { corners, frac })
    }
}

struct Cell {
    corners: [usize; 8],
    frac: [f64; 3],
}

impl Cell {
    #[inline]
    fn weight(&self, k: usize) -> f64 {
        let pick = |bit: usize, a: usize| {
            if k & bit == 0 {
                1.0 - self.frac[a]
            } else {
                self.frac[a]
            }
        };
        pick(1, 0) * pick(2, 1) * pick(4, 2)
    }
}

/// Where a slice image came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Sampled from an aligned volume; location is ground truth.
    #[default]
    Sampled,
    /// Target-domain acquisition.
    Target,
    /// Rendered from an implicit field.
    Rendered,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceImage {
    pub height: usize,
    pub width: usize,
    /// Voxels per pixel.
    pub spacing: f64,
    /// Row-major, `height * width`.
    pub pixels: Vec<f32>,
    pub location: Option<PlaneLocation>,
    pub provenance: Provenance,
}

impl SliceImage {
    pub fn new(height: usize, width: usize, spacing: f64, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {height}x{width} slice",
                pixels.len()
            )));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::invalid("slice spacing must be positive"));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("slice pixels".into()));
        }
        Ok(Self {
            height,
            width,
            spacing,
            pixels,
            location: None,
            provenance: Provenance::Sampled,
        })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            spacing: 1.0,
            pixels: vec![value; height * width],
            location: None,
            provenance: Provenance::Sampled,
        }
    }

    pub fn with_location(mut self, location: PlaneLocation) -> Self {
        self.location = Some(location);
        self
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.pixels[v * self.width + u]
    }

    pub fn require_location(&self) -> Result<&PlaneLocation> {
        self.location
            .as_ref()
            .ok_or_else(|| Error::invalid("slice has no plane location"))
    }
}

/// Cuts the slice of `v` (channel 0) lying on `plane`, sampling pixel
/// `(u, v)` at the pixel-to-world map of the plane.
pub fn extract_slice(
    v: &Volume,
    plane: &PlaneLocation,
    height: usize,
    width: usize,
) -> Result<SliceImage> {
    extract_slice_with(Exec::Sequential, v, plane, height, width)
}

/// [`extract_slice`] with the rows distributed according to `exec`.
pub fn extract_slice_with(
    exec: Exec,
    v: &Volume,
    plane: &PlaneLocation,
    height: usize,
    width: usize,
) -> Result<SliceImage> {
    if height < 2 || width < 2 {
        return Err(Error::invalid(format!(
            "slice extent {height}x{width} is below 2x2"
        )));
    }
    plane.ensure_non_degenerate()?;
    let mut pixels = vec![0f32; height * width];
    par::fill_chunks(exec, &mut pixels, width, |start, row| {
        let r = start / width;
        for (u, px) in row.iter_mut().enumerate() {
            let p = plane.pixel_to_world(u as f64, r as f64, height, width);
            *px = v.sample_channel(&p, 0) as f32;
        }
    });
    let spacing = plane.edges().0.norm() / (width - 1) as f64;
    Ok(SliceImage {
        height,
        width,
        spacing,
        pixels,
        location: Some(*plane),
        provenance: Provenance::Sampled,
    })
}
