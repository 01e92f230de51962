//! Multi-predictor monocular depth estimation with learned fusion.

pub mod data;
pub mod error;
pub mod gradsuite;
pub mod loss;
pub mod metrics;
pub mod mixer;
pub mod params;
pub mod predictor;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use loss::{ssi_loss, ssi_loss_value, SsiLossConfig};
pub use metrics::{compute_metrics, DepthCap, MetricsReport};
pub use mixer::{FusionLocation, MixerConfig, MixerKind, MixerModel};
pub use params::ParameterSet;
pub use predictor::{BasePredictorModel, PredictorArch, PredictorOutput};
pub use tensor::{Real, Tape, Tensor, Var};
