//! Two-stage training: independent base predictors, then a mixer over the
//! frozen predictors on a held-out split.

mod base;
mod checkpoint;
mod eval;
mod mixer;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{AugmentPolicy, DepthSample};
use crate::error::{Error, Result};
use crate::loss::SsiLossConfig;
use crate::tensor::{Real, Tensor};

pub use base::{train_base_predictors, train_predictor, PredictorSpec, TrainedPredictor};
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use eval::{evaluate_depths, predict_mixer, predict_predictor, predictor_outputs};
pub use mixer::{train_mixer, TrainedMixer};
pub use optim::{adamw_update, poly_lr, AdamWConfig, OptimizerState};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub power: f64,
    pub adam: AdamWConfig,
    pub seed: u64,
    pub loss: SsiLossConfig,
    /// Applied to base-predictor batches only; `None` trains on raw samples.
    pub augment: Option<AugmentPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 4,
            base_lr: 1e-4,
            power: 0.9,
            adam: AdamWConfig::default(),
            seed: 0,
            loss: SsiLossConfig::default(),
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        if !(self.base_lr > 0.0) || !(self.power >= 0.0) {
            return Err(Error::invalid("base_lr must be positive and power non-negative"));
        }
        self.adam.validate()?;
        self.loss.validate()
    }

    /// Schedule horizon `epochs * ceil(n / batch_size)`.
    pub fn total_steps(&self, n: usize) -> u64 {
        (self.epochs * n.div_ceil(self.batch_size)) as u64
    }
}

/// Independent seed for one `(purpose, index)` stream under `seed`.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update([0]);
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Epoch-wise shuffled mini-batches of indices into `0..n`.
pub(crate) fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

pub(crate) fn rng_for(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, index))
}

/// Stacks sample rgb and depth into `[N, 3, H, W]` and `[N, 1, H, W]`
/// plus the pooled mask.
pub(crate) fn stack_batch<T: Real>(samples: &[&DepthSample]) -> Result<(Tensor<T>, Tensor<T>, Vec<bool>)> {
    let rgb: Vec<Tensor<T>> = samples.iter().map(|s| s.rgb().cast()).collect();
    let depth: Vec<Tensor<T>> = samples.iter().map(|s| s.depth().cast()).collect();
    let rgb = Tensor::stack(&rgb.iter().collect::<Vec<_>>())?;
    let depth = Tensor::stack(&depth.iter().collect::<Vec<_>>())?;
    let mask = samples.iter().flat_map(|s| s.mask().iter().copied()).collect();
    Ok((rgb, depth, mask))
}

/// Re-labels numeric failures inside a training step as divergence of
/// `what`; other errors pass through.
fn diverged(what: &str, e: Error) -> Error {
    match e {
        Error::Domain { .. } | Error::NonFinite(_) => Error::Diverged {
            what: what.to_string(),
            detail: e.to_string(),
        },
        e => e,
    }
}

fn check_finite(what: impl Into<String>, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            what: what.into(),
            detail: format!("loss became {loss}"),
        })
    }
}
