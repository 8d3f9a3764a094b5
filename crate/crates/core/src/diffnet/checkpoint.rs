//! Parameter checkpoints: a JSON manifest listing named layer shapes,
//! hyperparameters, step count and seed, plus a raw little-endian f32 blob
//! holding every layer back to back in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{Layer, ModelParams, NetConfig};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "usplane-ckpt/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Model,
    Field,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub layers: Vec<Layer>,
    pub hyperparameters: serde_json::Value,
    pub step: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    kind: CheckpointKind,
    blob: String,
    layers: Vec<LayerEntry>,
    hyperparameters: serde_json::Value,
    step: u64,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    name: String,
    shape: Vec<usize>,
}

/// Blob path for a manifest: `model.ckpt.json` -> `model.ckpt.bin`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let blob = blob_path(path);
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        kind: ckpt.kind,
        blob: blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::invalid(format!("bad checkpoint path {}", path.display())))?
            .into(),
        layers: ckpt
            .layers
            .iter()
            .map(|l| LayerEntry {
                name: l.name.clone(),
                shape: l.tensor.shape().to_vec(),
            })
            .collect(),
        hyperparameters: ckpt.hyperparameters.clone(),
        step: ckpt.step,
        seed: ckpt.seed,
    };
    let mut bytes = Vec::new();
    for l in &ckpt.layers {
        for v in l.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(&blob, bytes)?;
    fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let value: serde_json::Value = serde_json::from_slice(&fs::read(path)?)?;
    if value.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::BadMagic(format!(
            "{} is not a {CHECKPOINT_FORMAT} manifest",
            path.display()
        )));
    }
    let m: Manifest = serde_json::from_value(value)?;
    let blob = fs::read(path.with_file_name(&m.blob))?;
    let mut total = 0usize;
    for l in &m.layers {
        let n = l
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::DimensionOverflow(format!("layer {} {:?}", l.name, l.shape)))?;
        total = total
            .checked_add(n)
            .ok_or_else(|| Error::DimensionOverflow("checkpoint size".into()))?;
    }
    if blob.len() < total {
        return Err(Error::TruncatedPayload {
            expected: total,
            found: blob.len(),
        });
    }
    if blob.len() > total {
        return Err(Error::ShapeMismatch(format!(
            "{} trailing bytes in checkpoint blob",
            blob.len() - total
        )));
    }
    let mut off = 0;
    let layers = m
        .layers
        .into_iter()
        .map(|l| {
            let n: usize = l.shape.iter().product();
            let data = blob[off..off + 4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            off += 4 * n;
            Layer {
                name: l.name,
                tensor: Tensor::new(&l.shape, data),
            }
        })
        .collect();
    Ok(Checkpoint {
        kind: m.kind,
        layers,
        hyperparameters: m.hyperparameters,
        step: m.step,
        seed: m.seed,
    })
}

impl ModelParams {
    /// Checkpoint with the network config under `hyperparameters.net` and
    /// any extra keys merged alongside.
    pub fn to_checkpoint(
        &self,
        extra: serde_json::Value,
        step: u64,
        seed: u64,
    ) -> Result<Checkpoint> {
        let mut hp = serde_json::Map::new();
        hp.insert("net".into(), serde_json::to_value(&self.config)?);
        if let serde_json::Value::Object(m) = extra {
            hp.extend(m);
        }
        Ok(Checkpoint {
            kind: CheckpointKind::Model,
            layers: self.layers().to_vec(),
            hyperparameters: serde_json::Value::Object(hp),
            step,
            seed,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Model {
            return Err(Error::BadMagic("checkpoint kind is not \"model\"".into()));
        }
        let net = ckpt
            .hyperparameters
            .get("net")
            .ok_or_else(|| Error::invalid("model checkpoint lacks hyperparameters.net"))?;
        let config: NetConfig = serde_json::from_value(net.clone())?;
        ModelParams::from_layers(config, ckpt.layers)
    }

    pub fn save(&self, path: impl AsRef<Path>, step: u64, seed: u64) -> Result<()> {
        write_checkpoint(
            path,
            &self.to_checkpoint(serde_json::Value::Null, step, seed)?,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(read_checkpoint(path)?)
    }
}
