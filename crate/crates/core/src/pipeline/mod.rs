//! Supervised training, cycle-consistency fine-tuning and inference.
//!
//! The supervised objective combines location and displacement regression
//! on labeled slices. Fine-tuning adds a cycle term on unlabeled target
//! images: predicted displacements along `S_i -> I_1 -> ... -> I_m -> S_k`
//! must sum to the known `L_i - L_k`.

mod loss;
mod train;

pub use loss::{
    build_cycle, composed_cycle_error, cycle_loss, finetune_loss, training_loss, CycleBatch,
    CycleConfig, LinkCycle, LossWeights, TrainingLoss,
};
pub use train::{finetune, train, validation_loss, LogEntry, Observer, TrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::diffnet::ModelParams;
use crate::error::{Error, Result};
use crate::geom3d::{fibonacci_sphere, sample_pose, seeded_rng, PlaneLocation, PoseSampling};
use crate::par::{self, Exec};
use crate::volume::{extract_slice, SliceImage, Volume};

/// Labeled slices drawn from an aligned volume.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub count: usize,
    pub sampling: PoseSampling,
    /// Size of the Fibonacci direction set normals are drawn from.
    pub directions: usize,
    pub seed: u64,
}

/// Poses are drawn sequentially from one seeded stream; only the slicing
/// runs under `exec`, so the result does not depend on it.
pub fn generate_dataset(
    volume: &Volume,
    spec: &DatasetSpec,
    exec: Exec,
) -> Result<Vec<SliceImage>> {
    if spec.count == 0 {
        return Err(Error::Empty("dataset count".into()));
    }
    let dirs = fibonacci_sphere(spec.directions, Some(spec.seed))?;
    let mut rng = seeded_rng(spec.seed);
    let planes = (0..spec.count)
        .map(|_| sample_pose(&dirs, &mut rng, &spec.sampling))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = (spec.sampling.extent.height, spec.sampling.extent.width);
    par::try_map(exec, &planes, |p| extract_slice(volume, p, h, w))
}

/// Predicted plane of every image.
pub fn infer(model: &ModelParams, images: &[SliceImage], exec: Exec) -> Result<Vec<PlaneLocation>> {
    model
        .infer_locations(exec, images)?
        .iter()
        .map(|row| PlaneLocation::from_flat(row))
        .collect()
}

/// Strips labels, as for an unlabeled target acquisition.
pub fn unlabeled(images: &[SliceImage]) -> Vec<SliceImage> {
    images
        .iter()
        .map(|s| SliceImage {
            location: None,
            ..s.clone()
        })
        .collect()
}
