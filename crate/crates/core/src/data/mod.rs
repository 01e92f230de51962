//! Samples, synthetic scenes, file codecs, augmentation and exports.

mod augment;
mod dataset;
mod pca;
pub mod pfm;
mod ply;
pub mod pnm;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment_sample, AugmentPolicy};
pub use dataset::{load_dataset, save_dataset, MANIFEST_FILE};
pub use pca::pca_principal_channel;
pub use ply::{depth_to_pointcloud, CameraIntrinsics, PointCloud};
pub use synth::{generate_synthetic_dataset, PrimitiveMix, SceneConfig};

/// One RGB image with metric ground truth. Zero depth marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSample {
    id: String,
    rgb: Tensor<f32>,
    depth: Tensor<f32>,
    mask: Vec<bool>,
}

impl DepthSample {
    /// `rgb` is `[3, H, W]` in `[0, 1]`, `depth` is `[1, H, W]` and non-negative.
    pub fn new(id: impl Into<String>, rgb: Tensor<f32>, depth: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        if rgb.shape().len() != 3 || rgb.shape()[0] != 3 {
            return Err(Error::shape("DepthSample", format!("rgb shape {:?}", rgb.shape())));
        }
        if depth.shape().len() != 3 || depth.shape()[0] != 1 || depth.shape()[1..] != rgb.shape()[1..] {
            return Err(Error::shape(
                "DepthSample",
                format!("depth {:?} vs rgb {:?}", depth.shape(), rgb.shape()),
            ));
        }
        if let Some(v) = rgb.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("sample {id}: rgb value {v} outside [0, 1]")));
        }
        if let Some(v) = depth.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!("sample {id}: depth value {v}")));
        }
        let mask = depth.data().iter().map(|&d| d > 0.0).collect();
        Ok(DepthSample { id, rgb, depth, mask })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn rgb(&self) -> &Tensor<f32> {
        &self.rgb
    }

    pub fn depth(&self) -> &Tensor<f32> {
        &self.depth
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.depth.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[2]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train_base: Vec<String>,
    pub train_mixer: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffles the training ids and holds out `floor(N / 8)` of them for the
/// mixer. The test list starts empty.
pub fn split_dataset(samples: &[DepthSample], seed: u64) -> Result<DatasetSplit> {
    let n = samples.len();
    if n < 8 {
        return Err(Error::invalid(format!("split needs at least 8 samples, got {n}")));
    }
    let mut ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::invalid(format!("duplicate sample id {dup}")));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_mixer = ids.split_off(n - n / 8);
    Ok(DatasetSplit {
        train_base: ids,
        train_mixer,
        test: Vec::new(),
    })
}

/// Looks up samples by id, preserving the order of `ids`.
pub fn select<'a>(samples: &'a [DepthSample], ids: &[String]) -> Result<Vec<&'a DepthSample>> {
    let index: std::collections::HashMap<&str, &DepthSample> =
        samples.iter().map(|s| (s.id(), s)).collect();
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::invalid(format!("unknown sample id {id}")))
        })
        .collect()
}
