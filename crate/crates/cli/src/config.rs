//! Per-subcommand run configs.
//!
//! A config is a JSON object. `seed` is accepted at the top level of every
//! config; every other key belongs to the subcommand's struct and unknown
//! keys are rejected. Relative paths resolve against the working
//! directory; absent input paths default to the fixed names in the run
//! directory.

use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use usplane::diffnet::NetConfig;
use usplane::geom3d::SliceExtent;
use usplane::implicit::{FieldConfig, FitConfig, RefineConfig};
use usplane::pipeline::{CycleConfig, TrainConfig};
use usplane::volume::{DomainShiftSpec, PhantomSpec};
use usplane::PlaneLocation;

use crate::CliError;

fn default_extent() -> SliceExtent {
    SliceExtent {
        height: 64,
        width: 64,
        spacing: 0.35,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenPhantom {
    /// Cube side in voxels.
    pub size: usize,
    /// Defaults to the asymmetric head-like phantom jittered by the seed.
    pub phantom: Option<PhantomSpec>,
}

impl Default for GenPhantom {
    fn default() -> Self {
        Self {
            size: 32,
            phantom: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSlices {
    pub volume: Option<PathBuf>,
    /// Output bundle is `<name>.json` in the run directory.
    pub name: String,
    pub count: usize,
    pub extent: SliceExtent,
    /// Defaults to the volume center.
    pub center: Option<[f64; 3]>,
    pub offset_radius: f64,
    pub directions: usize,
    /// Appearance shift applied to every slice, reseeded per slice.
    pub shift: Option<DomainShiftSpec>,
    /// Drop the ground-truth locations, as for a target acquisition.
    pub unlabeled: bool,
}

impl Default for SampleSlices {
    fn default() -> Self {
        Self {
            volume: None,
            name: "slices".into(),
            count: 200,
            extent: default_extent(),
            center: None,
            offset_radius: 3.0,
            directions: 512,
            shift: None,
            unlabeled: false,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Train {
    pub slices: Option<PathBuf>,
    /// Held-out bundle; when absent the last `val_count` training slices
    /// are held out.
    pub val: Option<PathBuf>,
    pub val_count: Option<usize>,
    /// Defaults to the stock network sized to the data: input extent from
    /// the slices, anchor center and scale from the label statistics.
    pub net: Option<NetConfig>,
    /// Warm start from a checkpoint instead of a fresh init.
    pub init: Option<PathBuf>,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Finetune {
    pub model: Option<PathBuf>,
    pub source: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub val_count: Option<usize>,
    pub train: TrainConfig,
    pub cycle: CycleConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Infer {
    pub model: Option<PathBuf>,
    pub slices: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Eval {
    /// Labeled slices the predictions are scored against.
    pub slices: Option<PathBuf>,
    /// A predictions file or a slice bundle whose anchors are taken as
    /// predictions. Takes precedence over `model` for the labeled slices.
    pub predictions: Option<PathBuf>,
    pub model: Option<PathBuf>,
    /// Sweep bundles; their frames are run through the model.
    pub sweeps: Vec<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sweep {
    pub volume: Option<PathBuf>,
    pub name: String,
    pub frames: usize,
    pub smoothness: f64,
    pub extent: SliceExtent,
    pub center: Option<[f64; 3]>,
    pub offset_radius: f64,
    pub shift: Option<DomainShiftSpec>,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            volume: None,
            name: "sweep".into(),
            frames: 40,
            smoothness: 0.5,
            extent: default_extent(),
            center: None,
            offset_radius: 3.0,
            shift: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitImplicit {
    pub slices: Option<PathBuf>,
    pub field: FieldConfig,
    pub fit: FitConfig,
    /// Domain padding in voxels around the slices' bounding box.
    pub margin: f64,
    pub init: Option<PathBuf>,
}

impl Default for FitImplicit {
    fn default() -> Self {
        Self {
            slices: None,
            field: FieldConfig::default(),
            fit: FitConfig::default(),
            margin: 1.0,
            init: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinePoses {
    /// Field checkpoint; ignored when `volume` is set.
    pub field: Option<PathBuf>,
    /// Use this volume's trilinear interpolant as a frozen field.
    pub volume: Option<PathBuf>,
    pub slices: Option<PathBuf>,
    pub refine: RefineConfig,
    /// Offsets every anchor row by a random vector of this norm first.
    pub perturb: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Render {
    pub field: Option<PathBuf>,
    pub volume: Option<PathBuf>,
    /// Explicit pose; otherwise slice `index` of `slices` supplies pose
    /// and raster size.
    pub plane: Option<PlaneLocation>,
    pub slices: Option<PathBuf>,
    pub index: usize,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub name: Option<String>,
}

/// Sets `value` at a dotted `path`, creating intermediate objects.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        if k.is_empty() {
            return Err(CliError::Config(format!("bad override key {path:?}")));
        }
        let obj = match cur {
            Value::Object(m) => m,
            v @ Value::Null => {
                *v = Value::Object(Map::new());
                v.as_object_mut().unwrap()
            }
            _ => {
                return Err(CliError::Config(format!(
                    "override {path:?}: {k:?} is not inside an object"
                )))
            }
        };
        if i + 1 == keys.len() {
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(k.to_string()).or_insert(Value::Null);
    }
    unreachable!()
}

/// `KEY=VALUE`; the value is parsed as JSON and falls back to a string.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {s:?} is not KEY=VALUE")))?;
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), v))
}

/// Removes the top-level `seed` and deserializes the rest.
pub fn resolve<C: DeserializeOwned>(mut raw: Value) -> Result<(C, Option<u64>), CliError> {
    if raw.is_null() {
        raw = Value::Object(Map::new());
    }
    let obj = raw
        .as_object_mut()
        .ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
    let seed = match obj.remove("seed") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_u64().ok_or_else(|| {
            CliError::Config(format!("seed must be a non-negative integer, got {v}"))
        })?),
    };
    let cfg = serde_json::from_value(raw).map_err(|e| CliError::Config(e.to_string()))?;
    Ok((cfg, seed))
}
