//! Tensor-level reverse-mode autodiff.
//!
//! Operations append nodes to a [`Tape`]; [`Tape::backward`] walks the tape
//! once in reverse and returns the gradient of a scalar node with respect to
//! every node that requires one. Leaves are either parameters (gradient
//! tracked) or constants (not tracked); an op node tracks gradients when any
//! input does.

use std::sync::Arc;

use super::tensor::{Real, Tensor};
use crate::geom3d::Vec3;
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AffineCols {
        x: Var,
        scale: Vec<T>,
    },
    Relu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Rows {
        x: Var,
        start: usize,
    },
    View {
        x: Var,
        offset: usize,
    },
    Reshape(Var),
    WeightedSum(Vec<(Var, T)>),
    MatMulConst {
        a: Tensor<T>,
        b: Var,
    },
    PosEncode {
        x: Var,
        octaves: usize,
    },
    SampleVolume {
        volume: Arc<Volume>,
        x: Var,
    },
    Mse(Var, Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of `v`, or `None` when `v` does not influence the output
    /// (or is untracked).
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when absent.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::ZERO; len])
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "elementwise op on mismatched lengths");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(va.shape(), data);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape(), v.data().iter().map(|a| *a * s).collect());
        let tracked = self.tracked(x);
        self.push(value, Op::Scale(x, s), tracked)
    }

    /// `y[r, c] = scale[c] * x[r, c] + shift[c]` on a matrix.
    pub fn affine_cols(&mut self, x: Var, scale: Vec<T>, shift: Vec<T>) -> Var {
        let v = self.value(x);
        let (rows, cols) = v.dims2();
        assert!(scale.len() == cols && shift.len() == cols);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(scale[c] * v.data()[r * cols + c] + shift[c]);
            }
        }
        let value = Tensor::new(v.shape(), data);
        let tracked = self.tracked(x);
        self.push(value, Op::AffineCols { x, scale }, tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::new(
            v.shape(),
            v.data()
                .iter()
                .map(|a| if *a > T::ZERO { *a } else { T::ZERO })
                .collect(),
        );
        let tracked = self.tracked(x);
        self.push(value, Op::Relu(x), tracked)
    }

    /// `x [n, in] -> [n, out]` with `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, inp) = xv.dims2();
        let (out, win) = wv.dims2();
        assert_eq!(inp, win, "linear: input width {inp} vs weight width {win}");
        assert_eq!(bv.len(), out);
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut y = vec![T::ZERO; n * out];
        for r in 0..n {
            let xr = &xd[r * inp..(r + 1) * inp];
            for o in 0..out {
                let wr = &wd[o * inp..(o + 1) * inp];
                let mut acc = bd[o];
                for k in 0..inp {
                    acc += xr[k] * wr[k];
                }
                y[r * out + o] = acc;
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        self.push(Tensor::new(&[n, out], y), Op::Linear { x, w, b }, tracked)
    }

    /// 2-D convolution of `x [C, H, W]` with `w [O, C, K, K]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let geo = ConvGeom::new(xv.shape(), wv.shape(), stride, pad);
        assert_eq!(bv.len(), geo.o);
        let y = conv_forward(&geo, xv.data(), wv.data(), bv.data());
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        self.push(
            Tensor::new(&[geo.o, geo.oh, geo.ow], y),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            tracked,
        )
    }

    /// `[C, H, W] -> [1, C]` channel means.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [c, h, w] = v.shape() else {
            panic!("global_avg_pool expects [C, H, W], got {:?}", v.shape());
        };
        let (c, hw) = (*c, h * w);
        let inv = T::from_f64(1.0 / hw as f64);
        let data = (0..c)
            .map(|ch| v.data()[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        let tracked = self.tracked(x);
        self.push(Tensor::new(&[1, c], data), Op::GlobalAvgPool(x), tracked)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (r, c) = self.value(*p).dims2();
                assert_eq!(r, rows, "concat_cols: row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let tracked = parts.iter().any(|p| self.tracked(*p));
        self.push(
            Tensor::new(&[rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            tracked,
        )
    }

    /// Stacks matrices with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).dims2().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = self.value(*p).dims2();
            assert_eq!(c, cols, "concat_rows: column mismatch");
            rows += r;
            data.extend_from_slice(self.value(*p).data());
        }
        let tracked = parts.iter().any(|p| self.tracked(*p));
        self.push(
            Tensor::new(&[rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            tracked,
        )
    }

    /// Rows `start..start + len` of a matrix.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let (r, c) = v.dims2();
        assert!(start + len <= r);
        let data = v.data()[start * c..(start + len) * c].to_vec();
        let tracked = self.tracked(x);
        self.push(Tensor::new(&[len, c], data), Op::Rows { x, start }, tracked)
    }

    /// Contiguous segment of the flattened `x`, given a new shape.
    pub fn view(&mut self, x: Var, offset: usize, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        let data = self.value(x).data()[offset..offset + n].to_vec();
        let tracked = self.tracked(x);
        self.push(Tensor::new(shape, data), Op::View { x, offset }, tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshaped(shape);
        let tracked = self.tracked(x);
        self.push(value, Op::Reshape(x), tracked)
    }

    /// `sum_i w_i * x_i` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let first = self.value(terms[0].0);
        let shape = first.shape().to_vec();
        let mut data = vec![T::ZERO; first.len()];
        for (v, w) in terms {
            let vv = self.value(*v);
            assert_eq!(vv.len(), data.len(), "weighted_sum: length mismatch");
            for (d, x) in data.iter_mut().zip(vv.data()) {
                *d += *w * *x;
            }
        }
        let tracked = terms.iter().any(|(v, _)| self.tracked(*v));
        self.push(
            Tensor::new(&shape, data),
            Op::WeightedSum(terms.to_vec()),
            tracked,
        )
    }

    /// Elementwise sum of same-shaped inputs.
    pub fn sum_all(&mut self, terms: &[Var]) -> Var {
        let t: Vec<_> = terms.iter().map(|v| (*v, T::ONE)).collect();
        self.weighted_sum(&t)
    }

    /// `a @ b` with constant `a [n, k]` and tracked `b [k, m]`.
    pub fn matmul_const(&mut self, a: Tensor<T>, b: Var) -> Var {
        let bv = self.value(b);
        let (n, k) = a.dims2();
        let (kb, m) = bv.dims2();
        assert_eq!(k, kb);
        let mut y = vec![T::ZERO; n * m];
        for r in 0..n {
            for j in 0..k {
                let s = a.data()[r * k + j];
                for c in 0..m {
                    y[r * m + c] += s * bv.data()[j * m + c];
                }
            }
        }
        let tracked = self.tracked(b);
        self.push(Tensor::new(&[n, m], y), Op::MatMulConst { a, b }, tracked)
    }

    /// Sinusoidal encoding `[n, d] -> [n, d * 2K]`: for each input column
    /// and octave `k < K`, `sin(2^k pi x), cos(2^k pi x)`.
    pub fn pos_encode(&mut self, x: Var, octaves: usize) -> Var {
        let v = self.value(x);
        let (n, d) = v.dims2();
        let width = d * 2 * octaves;
        let mut y = Vec::with_capacity(n * width);
        for r in 0..n {
            for a in 0..d {
                let xv = v.data()[r * d + a];
                for k in 0..octaves {
                    let w = T::from_f64(std::f64::consts::PI * (1u64 << k) as f64);
                    let t = w * xv;
                    y.push(t.sin());
                    y.push(t.cos());
                }
            }
        }
        let tracked = self.tracked(x);
        self.push(
            Tensor::new(&[n, width], y),
            Op::PosEncode { x, octaves },
            tracked,
        )
    }

    /// Trilinear samples (channel 0) at voxel coordinates `x [n, 3]`.
    pub fn sample_volume(&mut self, volume: Arc<Volume>, x: Var) -> Var {
        let v = self.value(x);
        let (n, d) = v.dims2();
        assert_eq!(d, 3);
        let y = (0..n)
            .map(|r| {
                let p = point(v.data(), r);
                T::from_f64(volume.sample_channel(&p, 0))
            })
            .collect();
        let tracked = self.tracked(x);
        self.push(
            Tensor::new(&[n, 1], y),
            Op::SampleVolume { volume, x },
            tracked,
        )
    }

    /// `mean((a - b)^2)` as a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "mse: length mismatch");
        let n = T::from_f64(va.len() as f64);
        let s: T = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (*x - *y) * (*x - *y))
            .sum();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    /// Signs of every rectifier input, in tape order. Two evaluations with
    /// equal patterns lie on the same linear piece of every rectifier.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(x) = n.op {
                out.extend(self.value(x).data().iter().map(|v| *v > T::ZERO));
            }
        }
        out
    }

    /// Gradient of the one-element node `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        self.backward_seeded(root, vec![T::ONE])
    }

    /// Vector-Jacobian product seeded with `seed` at `root`.
    pub fn backward_seeded(&self, root: Var, seed: Vec<T>) -> Grads<T> {
        assert_eq!(seed.len(), self.value(root).len());
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].tracked {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.tracked {
                grads[i] = None;
            }
        }
        Grads { grads }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::ZERO; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= *y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(a, b)| *a += *s * *b)
            }),
            Op::AffineCols { x, scale } => {
                let cols = scale.len();
                acc(*x, &mut |d| {
                    for (k, dv) in d.iter_mut().enumerate() {
                        *dv += scale[k % cols] * g[k];
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if xv[k] > T::ZERO {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, inp) = xv.dims2();
                let out = wv.dims2().0;
                let (xd, wd) = (xv.data(), wv.data());
                acc(*x, &mut |d| {
                    for r in 0..n {
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go == T::ZERO {
                                continue;
                            }
                            let wr = &wd[o * inp..(o + 1) * inp];
                            let dr = &mut d[r * inp..(r + 1) * inp];
                            for k in 0..inp {
                                dr[k] += go * wr[k];
                            }
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for r in 0..n {
                        let xr = &xd[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go == T::ZERO {
                                continue;
                            }
                            let dr = &mut d[o * inp..(o + 1) * inp];
                            for k in 0..inp {
                                dr[k] += go * xr[k];
                            }
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for r in 0..n {
                        for o in 0..out {
                            d[o] += g[r * out + o];
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let geo = ConvGeom::new(xv.shape(), wv.shape(), *stride, *pad);
                if self.tracked(*x) {
                    let dx = conv_backward_input(&geo, g, wv.data());
                    acc(*x, &mut |d| add_into(d, &dx));
                }
                if self.tracked(*w) {
                    let dw = conv_backward_weight(&geo, g, xv.data());
                    acc(*w, &mut |d| add_into(d, &dw));
                }
                let plane = geo.oh * geo.ow;
                acc(*b, &mut |d| {
                    for o in 0..geo.o {
                        d[o] += g[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape();
                let hw = shape[1] * shape[2];
                let inv = T::from_f64(1.0 / hw as f64);
                acc(*x, &mut |d| {
                    for (k, dv) in d.iter_mut().enumerate() {
                        *dv += g[k / hw] * inv;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.dims2().0;
                let total = node.value.dims2().1;
                let mut col = 0;
                for p in parts {
                    let w = self.value(*p).dims2().1;
                    acc(*p, &mut |d| {
                        for r in 0..rows {
                            for c in 0..w {
                                d[r * w + c] += g[r * total + col + c];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    acc(*p, &mut |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Rows { x, start } => {
                let c = node.value.dims2().1;
                acc(*x, &mut |d| {
                    add_into(&mut d[start * c..start * c + g.len()], g)
                });
            }
            Op::View { x, offset } => {
                acc(*x, &mut |d| add_into(&mut d[*offset..*offset + g.len()], g))
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::WeightedSum(terms) => {
                for (v, w) in terms {
                    acc(*v, &mut |d| {
                        d.iter_mut().zip(g).for_each(|(a, b)| *a += *w * *b)
                    });
                }
            }
            Op::MatMulConst { a, b } => {
                let (n, k) = a.dims2();
                let m = self.value(*b).dims2().1;
                acc(*b, &mut |d| {
                    for r in 0..n {
                        for j in 0..k {
                            let s = a.data()[r * k + j];
                            for c in 0..m {
                                d[j * m + c] += s * g[r * m + c];
                            }
                        }
                    }
                });
            }
            Op::PosEncode { x, octaves } => {
                let (n, dcols) = self.value(*x).dims2();
                let y = node.value.data();
                let width = dcols * 2 * octaves;
                acc(*x, &mut |d| {
                    for r in 0..n {
                        for a in 0..dcols {
                            let mut s = T::ZERO;
                            for k in 0..*octaves {
                                let w = T::from_f64(std::f64::consts::PI * (1u64 << k) as f64);
                                let idx = r * width + a * 2 * octaves + 2 * k;
                                s += w * (g[idx] * y[idx + 1] - g[idx + 1] * y[idx]);
                            }
                            d[r * dcols + a] += s;
                        }
                    }
                });
            }
            Op::SampleVolume { volume, x } => {
                let xv = self.value(*x).data();
                acc(*x, &mut |d| {
                    for r in 0..g.len() {
                        let (_, grad) = volume.sample_with_gradient(&point(xv, r), 0);
                        for a in 0..3 {
                            d[r * 3 + a] += g[r] * T::from_f64(grad[a]);
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let s = T::from_f64(2.0 / va.len() as f64) * g[0];
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += s * (va[k] - vb[k]);
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] -= s * (va[k] - vb[k]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
        }
    }
}

fn point<T: Real>(data: &[T], r: usize) -> Vec3 {
    Vec3::new(
        data[r * 3].to_f64(),
        data[r * 3 + 1].to_f64(),
        data[r * 3 + 2].to_f64(),
    )
}

#[inline]
fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    for (a, b) in d.iter_mut().zip(g) {
        *a += *b;
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    /// Per kernel column: the valid `ox` range.
    ox_range: Vec<(usize, usize)>,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        let [c, h, wd] = x else {
            panic!("conv2d input must be [C, H, W], got {x:?}");
        };
        let [o, wc, k, k2] = w else {
            panic!("conv2d weight must be [O, C, K, K], got {w:?}");
        };
        assert_eq!(c, wc, "conv2d channel mismatch");
        assert_eq!(k, k2);
        assert!(stride >= 1);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let ox_range = (0..*k)
            .map(|kx| valid_range(ow, *wd, kx, stride, pad))
            .collect();
        Self {
            c: *c,
            h: *h,
            w: *wd,
            o: *o,
            k: *k,
            stride,
            pad,
            oh,
            ow,
            ox_range,
        }
    }

    #[inline]
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// Output positions `o` with `o * stride + kx - pad` inside `[0, n)`.
fn valid_range(out: usize, n: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let mut lo = 0;
    while lo < out && ((lo * stride + kx) as isize - (pad as isize)) < 0 {
        lo += 1;
    }
    let mut hi = out;
    while hi > lo && ((hi - 1) * stride + kx) as isize - pad as isize >= n as isize {
        hi -= 1;
    }
    (lo, hi)
}

fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let plane = g.oh * g.ow;
    let mut y = vec![T::ZERO; g.o * plane];
    for o in 0..g.o {
        let out = &mut y[o * plane..(o + 1) * plane];
        out.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..g.c {
            let xin = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = w[((o * g.c + c) * g.k + ky) * g.k + kx];
                    let (lo, hi) = g.ox_range[kx];
                    for oy in 0..g.oh {
                        let Some(iy) = g.input_row(oy, ky) else {
                            continue;
                        };
                        let row = &xin[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut out[oy * g.ow..(oy + 1) * g.ow];
                        for ox in lo..hi {
                            orow[ox] += wv * row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_backward_input<T: Real>(g: &ConvGeom, gy: &[T], w: &[T]) -> Vec<T> {
    let plane = g.oh * g.ow;
    let mut dx = vec![T::ZERO; g.c * g.h * g.w];
    for o in 0..g.o {
        let go = &gy[o * plane..(o + 1) * plane];
        for c in 0..g.c {
            let din = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = w[((o * g.c + c) * g.k + ky) * g.k + kx];
                    let (lo, hi) = g.ox_range[kx];
                    for oy in 0..g.oh {
                        let Some(iy) = g.input_row(oy, ky) else {
                            continue;
                        };
                        let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                        let drow = &mut din[iy * g.w..(iy + 1) * g.w];
                        for ox in lo..hi {
                            drow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_backward_weight<T: Real>(g: &ConvGeom, gy: &[T], x: &[T]) -> Vec<T> {
    let plane = g.oh * g.ow;
    let mut dw = vec![T::ZERO; g.o * g.c * g.k * g.k];
    for o in 0..g.o {
        let go = &gy[o * plane..(o + 1) * plane];
        for c in 0..g.c {
            let xin = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let (lo, hi) = g.ox_range[kx];
                    let mut s = T::ZERO;
                    for oy in 0..g.oh {
                        let Some(iy) = g.input_row(oy, ky) else {
                            continue;
                        };
                        let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                        let row = &xin[iy * g.w..(iy + 1) * g.w];
                        for ox in lo..hi {
                            s += grow[ox] * row[ox * g.stride + kx - g.pad];
                        }
                    }
                    dw[((o * g.c + c) * g.k + ky) * g.k + kx] += s;
                }
            }
        }
    }
    dw
}
