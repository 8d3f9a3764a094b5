//! Coordinate fields `F(x, y, z) -> intensity` over the atlas frame.
//!
//! [`ImplicitField`] is a sinusoidal positional encoding followed by a
//! rectified perceptron. Atlas coordinates are mapped affinely from the
//! field's domain box to `[-1, 1]^3` first; the encoding has period 2 in
//! normalized units, so the box must contain every queried point for
//! queries to stay unambiguous. [`VolumeField`] wraps the trilinear
//! interpolant of an explicit volume behind the same interface.

mod fit;

pub use fit::{fit, refine_poses, FitConfig, FitOutcome, RefineConfig, RefineOutcome};

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointKind, Layer, Real, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::geom3d::{seeded_rng, PlaneLocation, Vec3};
use crate::par::{self, Exec};
use crate::volume::{Provenance, SliceImage, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub octaves: usize,
    pub hidden: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            octaves: 6,
            hidden: 64,
        }
    }
}

/// Axis-aligned box of atlas coordinates mapped onto `[-1, 1]^3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Domain {
    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(lo[a].is_finite() && hi[a].is_finite() && hi[a] > lo[a]) {
                return Err(Error::invalid(format!("domain axis {a}: need lo < hi")));
            }
        }
        Ok(Self { lo, hi })
    }

    /// Smallest box holding every pixel of every slice, grown by `margin`
    /// voxels on each side.
    pub fn covering(slices: &[SliceImage], margin: f64) -> Result<Self> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for s in slices {
            let l = s.require_location()?;
            let bl = l.tl() + (l.br() - l.tr());
            for c in [l.tl(), l.tr(), l.br(), bl] {
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        if slices.is_empty() {
            return Err(Error::Empty("slices for a domain".into()));
        }
        for a in 0..3 {
            lo[a] -= margin;
            hi[a] += margin;
        }
        Self::new(lo, hi)
    }

    fn scale_shift<T: Real>(&self) -> (Vec<T>, Vec<T>) {
        let scale: Vec<f64> = (0..3).map(|a| 2.0 / (self.hi[a] - self.lo[a])).collect();
        let shift = (0..3)
            .map(|a| T::from_f64(-1.0 - self.lo[a] * scale[a]))
            .collect();
        (scale.into_iter().map(T::from_f64).collect(), shift)
    }

    pub fn normalize(&self, p: &Vec3) -> Vec3 {
        Vec3::from_fn(|a, _| 2.0 * (p[a] - self.lo[a]) / (self.hi[a] - self.lo[a]) - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitField {
    pub config: FieldConfig,
    pub domain: Domain,
    layers: Vec<Layer>,
}

const FIELD_LAYERS: [&str; 6] = ["fc1.w", "fc1.b", "fc2.w", "fc2.b", "fc3.w", "fc3.b"];

impl ImplicitField {
    /// He-uniform hidden layers, `U(+-sqrt(3 / fan_in))` output layer,
    /// zero biases.
    pub fn init(config: FieldConfig, domain: Domain, seed: u64) -> Result<Self> {
        if config.octaves == 0 || config.octaves > 20 || config.hidden == 0 {
            return Err(Error::invalid(
                "field needs 1..=20 octaves and a nonzero width",
            ));
        }
        let mut rng = seeded_rng(seed);
        let inp = 3 * 2 * config.octaves;
        let h = config.hidden;
        let shapes: [(&[usize], usize, f64); 3] =
            [(&[h, inp], inp, 6.0), (&[h, h], h, 6.0), (&[1, h], h, 3.0)];
        let mut layers = Vec::new();
        for (i, (shape, fan_in, gain)) in shapes.into_iter().enumerate() {
            let bound = (gain / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| rng.random_range(-bound..bound) as f32)
                .collect();
            layers.push(Layer {
                name: FIELD_LAYERS[2 * i].into(),
                tensor: Tensor::new(shape, data),
            });
            layers.push(Layer {
                name: FIELD_LAYERS[2 * i + 1].into(),
                tensor: Tensor::zeros(&[shape[0]]),
            });
        }
        Ok(Self {
            config,
            domain,
            layers,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.tensor.len()).sum()
    }

    /// Zeroes the output layer, making the field identically its bias (0).
    pub fn zero_output(&mut self) {
        for l in &mut self.layers[4..] {
            l.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Sets the field to the constant `c` (output weights zero, bias `c`).
    pub fn set_constant(&mut self, c: f32) {
        self.zero_output();
        self.layers[5].tensor.data_mut()[0] = c;
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.layers
            .iter()
            .map(|l| {
                let t = l.tensor.cast::<T>();
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    /// Views into one flat leaf, in layer order.
    pub fn bind_flat<T: Real>(&self, tape: &mut Tape<T>, flat: Var) -> Vec<Var> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let v = tape.view(flat, off, l.tensor.shape());
                off += l.tensor.len();
                v
            })
            .collect()
    }

    pub fn flat(&self) -> Vec<f32> {
        self.layers
            .iter()
            .flat_map(|l| l.tensor.data().iter().copied())
            .collect()
    }

    /// `[n, 3]` atlas points to `[n, 1]` intensities.
    pub fn record<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], points: Var) -> Var {
        let (scale, shift) = self.domain.scale_shift::<T>();
        let x = tape.affine_cols(points, scale, shift);
        let x = tape.pos_encode(x, self.config.octaves);
        let h = tape.linear(x, vars[0], vars[1]);
        let h = tape.relu(h);
        let h = tape.linear(h, vars[2], vars[3]);
        let h = tape.relu(h);
        tape.linear(h, vars[4], vars[5])
    }

    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CheckpointKind::Field,
            layers: self.layers.clone(),
            hyperparameters: serde_json::json!({
                "field": serde_json::to_value(self.config)?,
                "domain": serde_json::to_value(self.domain)?,
            }),
            step,
            seed,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Field {
            return Err(Error::BadMagic("checkpoint kind is not \"field\"".into()));
        }
        let get = |k: &str| {
            ckpt.hyperparameters.get(k).cloned().ok_or_else(|| {
                Error::invalid(format!("field checkpoint lacks hyperparameters.{k}"))
            })
        };
        let config: FieldConfig = serde_json::from_value(get("field")?)?;
        let domain: Domain = serde_json::from_value(get("domain")?)?;
        let reference = Self::init(config, domain, 0)?;
        let ok = reference.layers.len() == ckpt.layers.len()
            && reference
                .layers
                .iter()
                .zip(&ckpt.layers)
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape());
        if !ok {
            return Err(Error::ShapeMismatch(
                "field checkpoint layers do not match its config".into(),
            ));
        }
        Ok(Self {
            config,
            domain,
            layers: ckpt.layers,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, step: u64, seed: u64) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint(step, seed)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(read_checkpoint(path)?)
    }
}

/// Trilinear interpolant of channel 0 of a volume.
#[derive(Clone, Debug)]
pub struct VolumeField {
    pub volume: Arc<Volume>,
}

impl VolumeField {
    pub fn new(volume: Volume) -> Self {
        Self {
            volume: Arc::new(volume),
        }
    }
}

/// Anything that can be queried at atlas points.
#[derive(Clone, Debug)]
pub enum Field {
    Neural(ImplicitField),
    Volume(VolumeField),
}

impl From<ImplicitField> for Field {
    fn from(f: ImplicitField) -> Self {
        Field::Neural(f)
    }
}

impl From<VolumeField> for Field {
    fn from(f: VolumeField) -> Self {
        Field::Volume(f)
    }
}

const QUERY_CHUNK: usize = 2048;

impl Field {
    /// `[n, 3]` points to `[n, 1]` values; `vars` are the neural layers as
    /// bound on `tape` (ignored for volume fields).
    pub fn record<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], points: Var) -> Var {
        match self {
            Field::Neural(f) => f.record(tape, vars, points),
            Field::Volume(v) => tape.sample_volume(v.volume.clone(), points),
        }
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        match self {
            Field::Neural(f) => f.bind(tape, trainable),
            Field::Volume(_) => Vec::new(),
        }
    }
}

/// Values at `points`, evaluated in independent chunks under `exec`.
pub fn query(field: &Field, points: &[Vec3], exec: Exec) -> Result<Vec<f64>> {
    if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite(format!("query point {i}")));
    }
    if let Field::Volume(v) = field {
        return Ok(par::map(exec, points, |p| v.volume.sample_channel(p, 0)));
    }
    let chunks: Vec<&[Vec3]> = points.chunks(QUERY_CHUNK).collect();
    let parts = par::map(exec, &chunks, |c| {
        let mut tape = Tape::<f32>::new();
        let vars = field.bind(&mut tape, false);
        let flat: Vec<f32> = c
            .iter()
            .flat_map(|p| [p.x as f32, p.y as f32, p.z as f32])
            .collect();
        let x = tape.constant(Tensor::new(&[c.len(), 3], flat));
        let y = field.record(&mut tape, &vars, x);
        tape.value(y)
            .data()
            .iter()
            .map(|v| *v as f64)
            .collect::<Vec<_>>()
    });
    Ok(parts.concat())
}

/// Evaluates the field on the pixel grid of `plane`, the same grid
/// [`crate::volume::extract_slice`] samples.
pub fn render_plane(
    field: &Field,
    plane: &PlaneLocation,
    height: usize,
    width: usize,
    exec: Exec,
) -> Result<SliceImage> {
    if height < 2 || width < 2 {
        return Err(Error::invalid(format!(
            "render extent {height}x{width} is below 2x2"
        )));
    }
    plane.ensure_non_degenerate()?;
    let values = query(field, &plane.pixel_grid(height, width), exec)?;
    let spacing = plane.edges().0.norm() / (width - 1) as f64;
    let pixels = values.into_iter().map(|v| v as f32).collect();
    Ok(SliceImage::new(height, width, spacing, pixels)?
        .with_location(*plane)
        .with_provenance(Provenance::Rendered))
}
