//! `.uvol` volumes and JSON-sidecar slice bundles.
//!
//! `.uvol` layout (all little-endian):
//!
//! ```text
//! b"UVOL1\0" | u32 H | u32 W | u32 D | u32 C | f32 voxel_size[3] | f32 data[H*W*D*C]
//! ```
//!
//! A slice bundle is a JSON manifest plus a raw f32 blob holding every
//! slice's pixels back to back, each row-major. A single slice is a bundle
//! of one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dims, Provenance, SliceImage, Volume};
use crate::error::{Error, Result};
use crate::geom3d::PlaneLocation;

pub const UVOL_MAGIC: &[u8; 6] = b"UVOL1\0";
const UVOL_HEADER: usize = 6 + 4 * 4 + 3 * 4;

/// Cap on `H*W*D*C` accepted from a file header.
const MAX_VALUES: u64 = 1 << 32;

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let d = v.dims();
    let to_u32 = |n: usize, what: &str| {
        u32::try_from(n).map_err(|_| Error::DimensionOverflow(format!("{what} = {n} exceeds u32")))
    };
    let mut out = Vec::with_capacity(UVOL_HEADER + 4 * v.data().len());
    out.extend_from_slice(UVOL_MAGIC);
    for (n, what) in [
        (d.height, "H"),
        (d.width, "W"),
        (d.depth, "D"),
        (v.channels(), "C"),
    ] {
        out.extend_from_slice(&to_u32(n, what)?.to_le_bytes());
    }
    for s in v.voxel_size_mm() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < UVOL_MAGIC.len() || &bytes[..UVOL_MAGIC.len()] != UVOL_MAGIC {
        return Err(Error::BadMagic("not a UVOL1 volume".into()));
    }
    if bytes.len() < UVOL_HEADER {
        return Err(Error::TruncatedPayload {
            expected: UVOL_HEADER,
            found: bytes.len(),
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let f32_at = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let (h, w, d, c) = (u32_at(6), u32_at(10), u32_at(14), u32_at(18));
    let voxel = [f32_at(22), f32_at(26), f32_at(30)];
    let count = [h, w, d, c]
        .iter()
        .try_fold(1u64, |acc, &n| acc.checked_mul(n as u64))
        .filter(|&n| n <= MAX_VALUES)
        .ok_or_else(|| Error::DimensionOverflow(format!("{h}x{w}x{d}x{c}")))?;
    let expected = UVOL_HEADER as u64 + 4 * count;
    let expected = usize::try_from(expected)
        .map_err(|_| Error::DimensionOverflow(format!("{h}x{w}x{d}x{c}")))?;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::ShapeMismatch(format!(
            "{} trailing bytes after volume payload",
            bytes.len() - expected
        )));
    }
    let data = bytes[UVOL_HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let dims = Dims {
        height: h as usize,
        width: w as usize,
        depth: d as usize,
    };
    Volume::new(dims, c as usize, voxel, data)
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v)?)?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

pub const BUNDLE_FORMAT: &str = "usplane-slices/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleManifest {
    format: String,
    /// Blob file name, relative to the manifest.
    blob: String,
    slices: Vec<SliceEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SliceEntry {
    height: usize,
    width: usize,
    spacing: f64,
    anchors: Option<PlaneLocation>,
    provenance: Provenance,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("f32")
}

/// Writes `<path>` (manifest) and `<path>` with extension `.f32` (pixels).
pub fn write_bundle(path: impl AsRef<Path>, slices: &[SliceImage]) -> Result<()> {
    let path = path.as_ref();
    let blob = blob_path(path);
    let manifest = BundleManifest {
        format: BUNDLE_FORMAT.into(),
        blob: blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::invalid(format!("bad bundle path {}", path.display())))?
            .to_string(),
        slices: slices
            .iter()
            .map(|s| SliceEntry {
                height: s.height,
                width: s.width,
                spacing: s.spacing,
                anchors: s.location,
                provenance: s.provenance,
            })
            .collect(),
    };
    let mut bytes = Vec::with_capacity(slices.iter().map(|s| 4 * s.pixels.len()).sum());
    for s in slices {
        for p in &s.pixels {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
    }
    fs::write(&blob, bytes)?;
    fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<Vec<SliceImage>> {
    let path = path.as_ref();
    let text = fs::read(path)?;
    let value: serde_json::Value = serde_json::from_slice(&text)?;
    if value.get("format").and_then(|f| f.as_str()) != Some(BUNDLE_FORMAT) {
        return Err(Error::BadMagic(format!(
            "{} is not a {BUNDLE_FORMAT} manifest",
            path.display()
        )));
    }
    let manifest: BundleManifest = serde_json::from_value(value)?;
    let blob = fs::read(path.with_file_name(&manifest.blob))?;
    let expected: usize = manifest.slices.iter().map(|e| 4 * e.height * e.width).sum();
    if blob.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: blob.len(),
        });
    }
    if blob.len() > expected {
        return Err(Error::ShapeMismatch(format!(
            "{} trailing bytes in slice blob",
            blob.len() - expected
        )));
    }
    let mut offset = 0;
    manifest
        .slices
        .into_iter()
        .map(|e| {
            let n = e.height * e.width;
            let pixels = blob[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            offset += 4 * n;
            let mut s = SliceImage::new(e.height, e.width, e.spacing, pixels)?;
            s.location = e.anchors;
            s.provenance = e.provenance;
            Ok(s)
        })
        .collect()
}

pub fn write_slice(path: impl AsRef<Path>, slice: &SliceImage) -> Result<()> {
    write_bundle(path, std::slice::from_ref(slice))
}

pub fn read_slice(path: impl AsRef<Path>) -> Result<SliceImage> {
    let mut v = read_bundle(path)?;
    if v.len() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "expected one slice, bundle has {}",
            v.len()
        )));
    }
    Ok(v.remove(0))
}
