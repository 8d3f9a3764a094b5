//! Plane parameterization in the atlas frame.
//!
//! A plane is described by three anchor points, the top-left, top-right and
//! bottom-right corners of the slice, stored as the rows of a 3x3 matrix.
//! Pixel `(u, v)` of a `H x W` slice (column `u`, row `v`) sits at
//!
//! ```text
//! p(u, v) = TL + u/(W-1) * (TR - TL) + v/(H-1) * (BR - TR)
//! ```
//!
//! Displacements are entrywise anchor differences and compose by addition,
//! so any chain `L_i -> ... -> L_k` telescopes to `L_i - L_k`.

use std::f64::consts::PI;
use std::ops::{Add, Neg, Sub};

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Cross-product norm below which a plane is treated as degenerate.
pub const DEGENERATE_EPS: f64 = 1e-9;

/// Golden angle in radians, `pi * (3 - sqrt 5)`.
pub const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneLocation {
    anchors: Matrix3<f64>,
}

impl PlaneLocation {
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        let anchors = Matrix3::from_fn(|r, c| rows[r][c]);
        Self::from_matrix(anchors)
    }

    pub fn from_matrix(anchors: Matrix3<f64>) -> Result<Self> {
        if anchors.iter().all(|v| v.is_finite()) {
            Ok(Self { anchors })
        } else {
            Err(Error::NonFinite("plane anchors".into()))
        }
    }

    pub fn from_corners(tl: Vec3, tr: Vec3, br: Vec3) -> Result<Self> {
        Self::from_matrix(Matrix3::from_rows(&[
            tl.transpose(),
            tr.transpose(),
            br.transpose(),
        ]))
    }

    /// Row-major flat view, `[TL.x, TL.y, TL.z, TR.x, ..., BR.z]`.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != 9 {
            return Err(Error::ShapeMismatch(format!(
                "plane needs 9 values, got {}",
                flat.len()
            )));
        }
        Self::from_matrix(Matrix3::from_row_slice(flat))
    }

    pub fn to_flat(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.anchors[(r, c)];
            }
        }
        out
    }

    pub fn to_rows(&self) -> [[f64; 3]; 3] {
        let f = self.to_flat();
        [[f[0], f[1], f[2]], [f[3], f[4], f[5]], [f[6], f[7], f[8]]]
    }

    pub fn anchors(&self) -> &Matrix3<f64> {
        &self.anchors
    }

    pub fn anchor(&self, row: usize) -> Vec3 {
        self.anchors.row(row).transpose()
    }

    pub fn tl(&self) -> Vec3 {
        self.anchor(0)
    }

    pub fn tr(&self) -> Vec3 {
        self.anchor(1)
    }

    pub fn br(&self) -> Vec3 {
        self.anchor(2)
    }

    /// In-plane edge vectors `(TR - TL, BR - TR)`.
    pub fn edges(&self) -> (Vec3, Vec3) {
        (self.tr() - self.tl(), self.br() - self.tr())
    }

    /// Unit normal `normalize(e_w x e_h)`.
    pub fn normal(&self) -> Result<Vec3> {
        let (ew, eh) = self.edges();
        let n = ew.cross(&eh);
        let norm = n.norm();
        if !(norm > DEGENERATE_EPS) {
            return Err(Error::DegeneratePlane(norm));
        }
        Ok(n / norm)
    }

    pub fn ensure_non_degenerate(&self) -> Result<()> {
        self.normal().map(|_| ())
    }

    /// Mean of the anchors that span the slice rectangle, i.e. the slice
    /// center: midpoint of TL and BR.
    pub fn center(&self) -> Vec3 {
        0.5 * (self.tl() + self.br())
    }

    pub fn translated(&self, t: &Vec3) -> Self {
        let mut a = self.anchors;
        for r in 0..3 {
            for c in 0..3 {
                a[(r, c)] += t[c];
            }
        }
        Self { anchors: a }
    }

    /// Applies `p -> rot * (p - pivot) + pivot` to every anchor.
    pub fn rotated_about(&self, rot: &Rotation3<f64>, pivot: &Vec3) -> Self {
        let rows: Vec<Vec3> = (0..3)
            .map(|r| rot * (self.anchor(r) - pivot) + pivot)
            .collect();
        Self {
            anchors: Matrix3::from_rows(&[
                rows[0].transpose(),
                rows[1].transpose(),
                rows[2].transpose(),
            ]),
        }
    }

    /// World position of pixel `(u, v)` under the pixel-to-world map.
    pub fn pixel_to_world(&self, u: f64, v: f64, height: usize, width: usize) -> Vec3 {
        let (ew, eh) = self.edges();
        let du = (width.max(2) - 1) as f64;
        let dv = (height.max(2) - 1) as f64;
        self.tl() + (ew * u) / du + (eh * v) / dv
    }

    /// World positions of every pixel, row-major (`v` outer, `u` inner).
    pub fn pixel_grid(&self, height: usize, width: usize) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(height * width);
        for v in 0..height {
            for u in 0..width {
                out.push(self.pixel_to_world(u as f64, v as f64, height, width));
            }
        }
        out
    }
}

/// Barycentric weights `(w_TL, w_TR, w_BR)` of each pixel, row-major, such
/// that `p(u, v) = w_TL * TL + w_TR * TR + w_BR * BR`. This is the
/// pixel-to-world map written as a linear function of the anchors.
pub fn pixel_weights(height: usize, width: usize) -> Vec<[f64; 3]> {
    let du = (width.max(2) - 1) as f64;
    let dv = (height.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(height * width);
    for v in 0..height {
        let b = v as f64 / dv;
        for u in 0..width {
            let a = u as f64 / du;
            out.push([1.0 - a, a - b, b]);
        }
    }
    out
}

impl Serialize for PlaneLocation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for PlaneLocation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        PlaneLocation::new(rows).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Displacement {
    pub delta: Matrix3<f64>,
}

impl Displacement {
    pub fn zero() -> Self {
        Self {
            delta: Matrix3::zeros(),
        }
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != 9 {
            return Err(Error::ShapeMismatch(format!(
                "displacement needs 9 values, got {}",
                flat.len()
            )));
        }
        Ok(Self {
            delta: Matrix3::from_row_slice(flat),
        })
    }

    pub fn to_flat(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.delta[(r, c)];
            }
        }
        out
    }
}

impl Neg for Displacement {
    type Output = Displacement;
    fn neg(self) -> Displacement {
        Displacement { delta: -self.delta }
    }
}

impl Add for Displacement {
    type Output = Displacement;
    fn add(self, rhs: Displacement) -> Displacement {
        Displacement {
            delta: self.delta + rhs.delta,
        }
    }
}

impl Sub for PlaneLocation {
    type Output = Displacement;
    fn sub(self, rhs: PlaneLocation) -> Displacement {
        displacement(&self, &rhs)
    }
}

/// `D_ik = L_i - L_k`.
pub fn displacement(li: &PlaneLocation, lk: &PlaneLocation) -> Displacement {
    Displacement {
        delta: li.anchors - lk.anchors,
    }
}

/// Composes a chain of displacements by entrywise addition.
pub fn compose(chain: &[Displacement]) -> Result<Displacement> {
    let (first, rest) = chain
        .split_first()
        .ok_or_else(|| Error::Empty("displacement chain".into()))?;
    Ok(rest.iter().fold(*first, |acc, d| acc + *d))
}

/// Slice raster geometry: pixel counts and spacing in voxels per pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceExtent {
    pub height: usize,
    pub width: usize,
    pub spacing: f64,
}

impl SliceExtent {
    pub fn new(height: usize, width: usize, spacing: f64) -> Result<Self> {
        let e = Self {
            height,
            width,
            spacing,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::invalid(format!(
                "slice extent must be at least 2x2, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return Err(Error::invalid(format!(
                "slice spacing must be positive, got {}",
                self.spacing
            )));
        }
        Ok(())
    }

    /// Physical edge lengths `(width, height)` in voxels.
    pub fn side_lengths(&self) -> (f64, f64) {
        (
            (self.width - 1) as f64 * self.spacing,
            (self.height - 1) as f64 * self.spacing,
        )
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Intermediate pose form between direction sampling and anchors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSpec {
    pub normal: Vec3,
    pub rotation: f64,
    pub offset: Vec3,
    pub extent: SliceExtent,
}

impl PoseSpec {
    pub fn new(normal: Vec3, rotation: f64, offset: Vec3, extent: SliceExtent) -> Result<Self> {
        if (normal.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "pose normal must be unit length, |n| = {}",
                normal.norm()
            )));
        }
        if !rotation.is_finite() || offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose".into()));
        }
        extent.validate()?;
        Ok(Self {
            normal,
            rotation,
            offset,
            extent,
        })
    }

    /// Anchors of the slice centered at `center + offset`, with
    /// `normalize(e_w x e_h) == normal`.
    pub fn to_location(&self, center: &Vec3) -> Result<PlaneLocation> {
        self.extent.validate()?;
        let n = self.normal;
        let (a, b) = tangent_basis(&n);
        let (s, c) = self.rotation.sin_cos();
        let along_w = a * c + b * s;
        let along_h = n.cross(&along_w);
        let (w, h) = self.extent.side_lengths();
        let mid = center + self.offset;
        let tl = mid - along_w * (0.5 * w) - along_h * (0.5 * h);
        let tr = tl + along_w * w;
        let br = tr + along_h * h;
        PlaneLocation::from_corners(tl, tr, br)
    }
}

/// Orthonormal `(a, b)` with `a x b = n`.
fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 {
        Vec3::x()
    } else {
        Vec3::y()
    };
    let a = (helper - n * helper.dot(n)).normalize();
    let b = n.cross(&a);
    (a, b)
}

/// Uniformly distributed random rotation (normalized Gaussian quaternion).
pub fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                q[0], q[1], q[2], q[3],
            ));
        }
    }
}

/// Fibonacci lattice on the unit sphere: `z_i = 1 - 2(i + 0.5)/n`,
/// azimuth `i * golden_angle`. With `rotation_seed`, the whole lattice is
/// rotated by a seeded uniform random rotation.
pub fn fibonacci_sphere(n: usize, rotation_seed: Option<u64>) -> Result<Vec<Vec3>> {
    if n == 0 {
        return Err(Error::invalid("fibonacci_sphere needs n >= 1"));
    }
    let rot = rotation_seed.map(|seed| {
        let mut rng = seeded_rng(seed);
        random_rotation(&mut rng)
    });
    Ok((0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = i as f64 * GOLDEN_ANGLE;
            let p = Vec3::new(r * phi.cos(), r * phi.sin(), z);
            match &rot {
                Some(q) => q * p,
                None => p,
            }
        })
        .collect())
}

/// Where sampled planes are placed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSampling {
    pub extent: SliceExtent,
    /// Atlas point the slices are centered on (usually the volume center).
    pub center: [f64; 3],
    /// Plane centers are drawn uniformly from a ball of this radius.
    pub offset_radius: f64,
}

impl PoseSampling {
    pub fn center(&self) -> Vec3 {
        Vec3::from(self.center)
    }
}

/// Draws one plane: a direction uniformly from `directions`, an in-plane
/// rotation uniform in `[0, 2pi)` and a center offset uniform in the ball.
pub fn sample_pose(
    directions: &[Vec3],
    rng: &mut impl Rng,
    sampling: &PoseSampling,
) -> Result<PlaneLocation> {
    sample_pose_spec(directions, rng, sampling)?.to_location(&sampling.center())
}

pub fn sample_pose_spec(
    directions: &[Vec3],
    rng: &mut impl Rng,
    sampling: &PoseSampling,
) -> Result<PoseSpec> {
    sampling.extent.validate()?;
    if directions.is_empty() {
        return Err(Error::Empty("direction list".into()));
    }
    if !(sampling.offset_radius >= 0.0) {
        return Err(Error::invalid("offset radius must be >= 0"));
    }
    let normal = directions[rng.random_range(0..directions.len())].normalize();
    let rotation = rng.random_range(0.0..2.0 * PI);
    let offset = random_in_ball(rng, sampling.offset_radius);
    PoseSpec::new(normal, rotation, offset, sampling.extent)
}

pub fn random_unit_vector(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

pub fn random_in_ball(rng: &mut impl Rng, radius: f64) -> Vec3 {
    if radius == 0.0 {
        return Vec3::zeros();
    }
    let u: f64 = rng.random();
    random_unit_vector(rng) * (radius * u.cbrt())
}

/// Acute angle between the two plane normals, in `[0, pi/2]`. The atan2
/// form stays accurate near 0, where `acos` of the dot product loses half
/// the significant digits.
pub fn dihedral_angle(a: &PlaneLocation, b: &PlaneLocation) -> Result<f64> {
    let na = a.normal()?;
    let nb = b.normal()?;
    Ok(na.cross(&nb).norm().atan2(na.dot(&nb).abs()))
}

/// Mean Euclidean distance between corresponding anchor rows.
pub fn anchor_distance(a: &PlaneLocation, b: &PlaneLocation) -> f64 {
    (0..3)
        .map(|r| (a.anchor(r) - b.anchor(r)).norm())
        .sum::<f64>()
        / 3.0
}

/// Rotation by `angle` about `axis`.
pub fn axis_rotation(axis: &Vec3, angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle)
}

/// Deterministic generator for a seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from `(seed, stream)` (splitmix64).
pub fn subseed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
