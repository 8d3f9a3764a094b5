//! Slice encoder and the location / displacement heads.
//!
//! The encoder is a stack of stride-2 3x3 convolutions, each followed by a
//! rectifier, then a global average pool to a width-`F` feature vector.
//! Both heads are two-layer perceptrons producing nine numbers in anchor row
//! order (TL, TR, BR). Head outputs `o` are mapped to atlas voxels by a
//! fixed affine map: `L = center + scale * o` and `D = scale * o`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::geom3d::seeded_rng;
use crate::par::{self, Exec};
use crate::volume::SliceImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Input slice extent `(height, width)` in pixels.
    pub input: (usize, usize),
    /// Output channels of each encoder convolution.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    /// Hidden width of both heads.
    pub hidden: usize,
    /// Atlas point that a zero location-head output maps to.
    pub anchor_center: [f64; 3],
    /// Voxels per unit of head output.
    pub anchor_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input: (64, 64),
            channels: vec![8, 16, 32, 64],
            kernel: 3,
            stride: 2,
            hidden: 32,
            anchor_center: [15.5; 3],
            anchor_scale: 16.0,
        }
    }
}

impl NetConfig {
    pub fn feature_width(&self) -> usize {
        *self.channels.last().unwrap_or(&1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::invalid(
                "encoder needs at least one nonzero conv width",
            ));
        }
        if self.kernel == 0 || self.stride == 0 || self.hidden == 0 {
            return Err(Error::invalid(
                "kernel, stride and hidden width must be >= 1",
            ));
        }
        if self.input.0 < self.kernel || self.input.1 < self.kernel {
            return Err(Error::invalid("input smaller than the kernel"));
        }
        if !(self.anchor_scale > 0.0 && self.anchor_scale.is_finite()) {
            return Err(Error::invalid("anchor_scale must be > 0"));
        }
        Ok(())
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }
}

/// Named parameter tensor. Names are unique and the order is fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub tensor: Tensor<f32>,
}

/// Which parameters `bind` exposes to the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Encoder bound as constants.
    Heads,
    Nothing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: NetConfig,
    layers: Vec<Layer>,
}

/// Parameters placed on a tape, in layer order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    n_conv: usize,
}

const HEAD_LAYERS: [&str; 8] = [
    "loc.fc1.w",
    "loc.fc1.b",
    "loc.fc2.w",
    "loc.fc2.b",
    "disp.fc1.w",
    "disp.fc1.b",
    "disp.fc2.w",
    "disp.fc2.b",
];

impl ModelParams {
    /// He-style uniform init: hidden layers `U(+-sqrt(6 / fan_in))`, output
    /// layers `U(+-sqrt(3 / fan_in))`, biases zero.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut layers = Vec::new();
        let mut uniform = |name: String, shape: &[usize], fan_in: usize, gain: f64| {
            let bound = (gain / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| rng.random_range(-bound..bound) as f32)
                .collect();
            Layer {
                name,
                tensor: Tensor::new(shape, data),
            }
        };
        let k = config.kernel;
        let mut cin = 1;
        for (i, &cout) in config.channels.iter().enumerate() {
            layers.push(uniform(
                format!("conv{i}.w"),
                &[cout, cin, k, k],
                cin * k * k,
                6.0,
            ));
            layers.push(Layer {
                name: format!("conv{i}.b"),
                tensor: Tensor::zeros(&[cout]),
            });
            cin = cout;
        }
        let f = config.feature_width();
        let h = config.hidden;
        for (prefix, fin) in [("loc", f), ("disp", 2 * f)] {
            layers.push(uniform(format!("{prefix}.fc1.w"), &[h, fin], fin, 6.0));
            layers.push(Layer {
                name: format!("{prefix}.fc1.b"),
                tensor: Tensor::zeros(&[h]),
            });
            layers.push(uniform(format!("{prefix}.fc2.w"), &[9, h], h, 3.0));
            layers.push(Layer {
                name: format!("{prefix}.fc2.b"),
                tensor: Tensor::zeros(&[9]),
            });
        }
        Ok(Self { config, layers })
    }

    /// Rebuilds parameters from named layers, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_layers(config: NetConfig, layers: Vec<Layer>) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        if reference.layers.len() != layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} layers, got {}",
                reference.layers.len(),
                layers.len()
            )));
        }
        for (r, l) in reference.layers.iter().zip(&layers) {
            if r.name != l.name || r.tensor.shape() != l.tensor.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} {:?} does not match expected {} {:?}",
                    l.name,
                    l.tensor.shape(),
                    r.name,
                    r.tensor.shape()
                )));
            }
        }
        Ok(Self { config, layers })
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

    pub fn layer(&self, name: &str) -> Option<&Tensor<f32>> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .map(|l| &l.tensor)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.layers
            .iter_mut()
            .find(|l| l.name == name)
            .map(|l| &mut l.tensor)
    }

    pub fn is_encoder_layer(name: &str) -> bool {
        name.starts_with("conv")
    }

    /// Zeroes every parameter of the two heads.
    pub fn zero_heads(&mut self) {
        for l in &mut self.layers {
            if HEAD_LAYERS.contains(&l.name.as_str()) {
                l.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn flat(&self) -> Vec<f32> {
        self.layers
            .iter()
            .flat_map(|l| l.tensor.data().iter().copied())
            .collect()
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: Trainable) -> Bound {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                let t = l.tensor.cast::<T>();
                let train = match trainable {
                    Trainable::All => true,
                    Trainable::Heads => !Self::is_encoder_layer(&l.name),
                    Trainable::Nothing => false,
                };
                if train {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        Bound {
            vars,
            n_conv: self.config.channels.len(),
        }
    }

    /// Binds every layer as a view into one flat tracked vector laid out in
    /// layer order (the layout of [`ModelParams::flat`]).
    pub fn bind_flat<T: Real>(&self, tape: &mut Tape<T>, flat: Var) -> Bound {
        let mut off = 0;
        let vars = self
            .layers
            .iter()
            .map(|l| {
                let v = tape.view(flat, off, l.tensor.shape());
                off += l.tensor.len();
                v
            })
            .collect();
        Bound {
            vars,
            n_conv: self.config.channels.len(),
        }
    }

    /// Same layout with values replaced from a flat vector.
    pub fn with_flat(&self, flat: &[f32]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        let mut off = 0;
        for l in &mut out.layers {
            let n = l.tensor.len();
            l.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(out)
    }

    fn check_extent(&self, img: &SliceImage) -> Result<()> {
        if img.extent() != self.config.input {
            return Err(Error::ExtentMismatch {
                expected: self.config.input,
                got: img.extent(),
            });
        }
        Ok(())
    }

    /// Feature rows `[B, F]` for a batch of images.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        images: &[&SliceImage],
    ) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::Empty("encode batch".into()));
        }
        let rows = images
            .iter()
            .map(|img| {
                self.check_extent(img)?;
                Ok(self.encode_one(tape, b, img))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.concat_rows(&rows))
    }

    fn encode_one<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, img: &SliceImage) -> Var {
        let (h, w) = img.extent();
        let mut x = tape.constant(Tensor::from_f32(&[1, h, w], &img.pixels));
        for i in 0..b.n_conv {
            x = tape.conv2d(
                x,
                b.vars[2 * i],
                b.vars[2 * i + 1],
                self.config.stride,
                self.config.pad(),
            );
            x = tape.relu(x);
        }
        tape.global_avg_pool(x)
    }

    fn head<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, first: usize, x: Var) -> Var {
        let base = 2 * b.n_conv + first;
        let h = tape.linear(x, b.vars[base], b.vars[base + 1]);
        let h = tape.relu(h);
        tape.linear(h, b.vars[base + 2], b.vars[base + 3])
    }

    /// `[B, F] -> [B, 9]` predicted anchor rows in atlas voxels.
    pub fn predict_location<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, feats: Var) -> Var {
        let o = self.head(tape, b, 0, feats);
        let s = T::from_f64(self.config.anchor_scale);
        let shift = (0..9)
            .map(|k| T::from_f64(self.config.anchor_center[k % 3]))
            .collect();
        tape.affine_cols(o, vec![s; 9], shift)
    }

    /// `([B, F], [B, F]) -> [B, 9]` predicted `L_i - L_k` for ordered pairs.
    pub fn predict_displacement<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        fi: Var,
        fk: Var,
    ) -> Var {
        let x = tape.concat_cols(&[fi, fk]);
        let o = self.head(tape, b, 4, x);
        let s = T::from_f64(self.config.anchor_scale);
        tape.affine_cols(o, vec![s; 9], vec![T::ZERO; 9])
    }

    /// Frozen forward pass of a single image to its feature vector.
    pub fn features(&self, img: &SliceImage) -> Result<Vec<f32>> {
        self.check_extent(img)?;
        let mut tape = Tape::<f32>::new();
        let b = self.bind(&mut tape, Trainable::Nothing);
        let v = self.encode_one(&mut tape, &b, img);
        Ok(tape.value(v).data().to_vec())
    }

    /// Frozen per-image location predictions, one independent tape per image.
    pub fn infer_locations(&self, exec: Exec, images: &[SliceImage]) -> Result<Vec<[f64; 9]>> {
        par::try_map(exec, images, |img| {
            self.check_extent(img)?;
            let mut tape = Tape::<f32>::new();
            let b = self.bind(&mut tape, Trainable::Nothing);
            let v = self.encode_one(&mut tape, &b, img);
            let l = self.predict_location(&mut tape, &b, v);
            let d = tape.value(l).data();
            let mut out = [0.0; 9];
            for k in 0..9 {
                out[k] = d[k] as f64;
            }
            if out.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("location prediction".into()));
            }
            Ok(out)
        })
    }

    /// Frozen displacement prediction from two feature vectors.
    pub fn infer_displacement(&self, fi: &[f32], fk: &[f32]) -> [f64; 9] {
        let mut tape = Tape::<f32>::new();
        let b = self.bind(&mut tape, Trainable::Nothing);
        let f = self.config.feature_width();
        let vi = tape.constant(Tensor::new(&[1, f], fi.to_vec()));
        let vk = tape.constant(Tensor::new(&[1, f], fk.to_vec()));
        let d = self.predict_displacement(&mut tape, &b, vi, vk);
        let mut out = [0.0; 9];
        for (o, v) in out.iter_mut().zip(tape.value(d).data()) {
            *o = *v as f64;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3d::seeded_rng;

    fn tiny() -> NetConfig {
        NetConfig {
            input: (9, 8),
            channels: vec![2, 3],
            hidden: 4,
            anchor_center: [4.0, 5.0, 6.0],
            anchor_scale: 2.0,
            ..NetConfig::default()
        }
    }

    fn image(seed: u64, h: usize, w: usize) -> SliceImage {
        let mut rng = seeded_rng(seed);
        SliceImage::new(h, w, 1.0, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn layout_and_counts() {
        let p = ModelParams::init(NetConfig::default(), 1).unwrap();
        let names: Vec<_> = p.layers().iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names[0], "conv0.w");
        assert_eq!(names[8], "loc.fc1.w");
        assert_eq!(p.layer("loc.fc1.w").unwrap().shape(), &[32, 64]);
        assert_eq!(p.layer("disp.fc1.w").unwrap().shape(), &[32, 128]);
        assert_eq!(p.layer("disp.fc2.w").unwrap().shape(), &[9, 32]);
        let conv = 8 * 9 + 8 + 16 * 8 * 9 + 16 + 32 * 16 * 9 + 32 + 64 * 32 * 9 + 64;
        let heads = (64 * 32 + 32 + 32 * 9 + 9) + (128 * 32 + 32 + 32 * 9 + 9);
        assert_eq!(p.num_params(), conv + heads);
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut p = ModelParams::init(tiny(), 2).unwrap();
        for l in p.layers_mut() {
            l.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(p
            .features(&image(1, 9, 8))
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn zero_heads_give_zero_raw_output() {
        let mut p = ModelParams::init(tiny(), 3).unwrap();
        p.zero_heads();
        let loc = p
            .infer_locations(Exec::Sequential, &[image(2, 9, 8)])
            .unwrap()[0];
        for (k, v) in loc.iter().enumerate() {
            assert_eq!(*v, p.config.anchor_center[k % 3]);
        }
        let f = p.features(&image(2, 9, 8)).unwrap();
        assert_eq!(p.infer_displacement(&f, &f), [0.0; 9]);
    }

    #[test]
    fn duplicate_rows_and_permutation() {
        let p = ModelParams::init(tiny(), 4).unwrap();
        let (a, b) = (image(5, 9, 8), image(6, 9, 8));
        let mut tape = Tape::<f32>::new();
        let bound = p.bind(&mut tape, Trainable::All);
        let v = p.encode(&mut tape, &bound, &[&a, &b, &a]).unwrap();
        let l = p.predict_location(&mut tape, &bound, v);
        let rows = tape.value(l).data();
        assert_eq!(&rows[0..9], &rows[18..27]);
        let fwd = p
            .infer_locations(Exec::Parallel, &[a.clone(), b.clone()])
            .unwrap();
        let rev = p.infer_locations(Exec::Sequential, &[b, a]).unwrap();
        assert_eq!(fwd[0], rev[1]);
        assert_eq!(fwd[1], rev[0]);
        assert_eq!(&rows[0..9], &fwd[0].map(|x| x as f32)[..]);
    }

    #[test]
    fn extent_mismatch_is_reported() {
        let p = ModelParams::init(tiny(), 4).unwrap();
        let err = p.features(&image(1, 8, 8)).unwrap_err();
        assert!(matches!(
            err,
            Error::ExtentMismatch {
                expected: (9, 8),
                got: (8, 8)
            }
        ));
    }

    #[test]
    fn frozen_encoder_has_no_gradient() {
        let p = ModelParams::init(tiny(), 4).unwrap();
        let img = image(1, 9, 8);
        let mut tape = Tape::<f32>::new();
        let b = p.bind(&mut tape, Trainable::Heads);
        let v = p.encode(&mut tape, &b, &[&img]).unwrap();
        let l = p.predict_location(&mut tape, &b, v);
        let s = tape.sum(l);
        let g = tape.backward(s);
        assert!(g.get(b.vars[0]).is_none());
        assert!(g.get(b.vars[4]).is_some());
    }

    #[test]
    fn from_layers_checks_layout() {
        let p = ModelParams::init(tiny(), 4).unwrap();
        let mut layers = p.layers().to_vec();
        assert_eq!(ModelParams::from_layers(tiny(), layers.clone()).unwrap(), p);
        layers[0].tensor = Tensor::zeros(&[1]);
        assert!(ModelParams::from_layers(tiny(), layers).is_err());
    }
}
