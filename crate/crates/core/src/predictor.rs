//! Weak base depth predictors.
//!
//! Each predictor is a stack of "same"-padded 3x3 conv blocks followed by
//! a feature layer (the penultimate layer the mixers consume) and a
//! sigmoid depth head scaled by kappa. Varying block dilation gives
//! predictors with local versus enlarged receptive fields.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mixer::depth_head;
use crate::params::{init_conv, BoundParams, ParameterSet};
use crate::tensor::{ActivationKind, Real, Tape, Tensor, Var};

pub const DEFAULT_FEATURE_CHANNELS: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictorArch {
    /// Channels per conv block.
    pub width: usize,
    /// One dilation factor per block; the length is the block count.
    pub dilations: Vec<usize>,
    pub activation: ActivationKind,
}

impl PredictorArch {
    pub fn new(width: usize, dilations: Vec<usize>, activation: ActivationKind) -> Result<Self> {
        let arch = PredictorArch {
            width,
            dilations,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn depth(&self) -> usize {
        self.dilations.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilations.is_empty() {
            return Err(Error::invalid("predictor needs at least one conv block"));
        }
        if self.width == 0 {
            return Err(Error::invalid("predictor width must be >= 1"));
        }
        if self.dilations.contains(&0) {
            return Err(Error::invalid("dilation must be >= 1"));
        }
        Ok(())
    }

    /// Named presets used by configs: `local`, `dilated`, `context`, `wide`.
    pub fn preset(name: &str) -> Option<Self> {
        let (w, d, a) = match name {
            "local" => (8, vec![1, 1], ActivationKind::Elu),
            "dilated" => (8, vec![2, 4], ActivationKind::Elu),
            "context" => (8, vec![1, 3], ActivationKind::Tanh),
            "wide" => (12, vec![1], ActivationKind::Elu),
            _ => return None,
        };
        Some(PredictorArch {
            width: w,
            dilations: d,
            activation: a,
        })
    }
}

/// Text form `w<width>:d<dil>.<dil>...:<activation>`, e.g. `w8:d1.2:elu`.
impl fmt::Display for PredictorArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d: Vec<String> = self.dilations.iter().map(usize::to_string).collect();
        write!(f, "w{}:d{}:{}", self.width, d.join("."), self.activation)
    }
}

impl FromStr for PredictorArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(p) = Self::preset(s) {
            return Ok(p);
        }
        let bad = || Error::invalid(format!("bad predictor arch `{s}`"));
        let mut parts = s.split(':');
        let w = parts.next().and_then(|p| p.strip_prefix('w')).ok_or_else(bad)?;
        let d = parts.next().and_then(|p| p.strip_prefix('d')).ok_or_else(bad)?;
        let a = parts.next().ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        let width = w.parse().map_err(|_| bad())?;
        let dilations = d
            .split('.')
            .map(|x| x.parse().map_err(|_| bad()))
            .collect::<Result<Vec<usize>>>()?;
        PredictorArch::new(width, dilations, a.parse()?)
    }
}

/// Handles to one predictor's outputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PredictorOutput {
    /// Penultimate-layer features `[N, C_f, H, W]`.
    pub features: Var,
    /// Depth `[N, 1, H, W]` in `(0, kappa)`.
    pub depth: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasePredictorModel<T> {
    pub arch: PredictorArch,
    pub feature_channels: usize,
    pub kappa: f64,
    pub seed: u64,
    pub params: ParameterSet<T>,
}

impl<T: Real> BasePredictorModel<T> {
    /// Deterministic in `(arch, feature_channels, seed)`.
    pub fn build(
        arch: PredictorArch,
        feature_channels: usize,
        kappa: f64,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        if feature_channels == 0 {
            return Err(Error::invalid("feature_channels must be >= 1"));
        }
        if !(kappa > 0.0) {
            return Err(Error::invalid("kappa must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let mut cin = 3;
        for i in 0..arch.depth() {
            init_conv(&mut params, &format!("block{i}"), cin, arch.width, &mut rng)?;
            cin = arch.width;
        }
        init_conv(&mut params, "features", cin, feature_channels, &mut rng)?;
        init_conv(&mut params, "head", feature_channels, 1, &mut rng)?;
        Ok(BasePredictorModel {
            arch,
            feature_channels,
            kappa,
            seed,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Forward multiply-accumulates for one `h x w` image.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let mut total = 0;
        let mut cin = 3;
        for _ in 0..self.arch.depth() {
            total += crate::tensor::conv_macs(1, cin, self.arch.width, h, w);
            cin = self.arch.width;
        }
        total += crate::tensor::conv_macs(1, cin, self.feature_channels, h, w);
        total + crate::tensor::conv_macs(1, self.feature_channels, 1, h, w)
    }

    fn check_input(&self, tape: &Tape<T>, rgb: Var) -> Result<()> {
        let shape = tape.shape(rgb)?;
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape(
                "predictor",
                format!("expected [N, 3, H, W] rgb, got {shape:?}"),
            ));
        }
        Ok(())
    }

    pub fn forward_features(&self, tape: &Tape<T>, p: &BoundParams, rgb: Var) -> Result<Var> {
        self.check_input(tape, rgb)?;
        let mut x = rgb;
        for (i, &d) in self.arch.dilations.iter().enumerate() {
            let y = tape.conv2d_3x3_dilated(
                x,
                p.get(&format!("block{i}.weight"))?,
                Some(p.get(&format!("block{i}.bias"))?),
                d,
            )?;
            x = tape.activation(y, self.arch.activation)?;
        }
        let y = tape.conv2d_3x3(x, p.get("features.weight")?, Some(p.get("features.bias")?))?;
        tape.activation(y, self.arch.activation)
    }

    pub fn forward(&self, tape: &Tape<T>, p: &BoundParams, rgb: Var) -> Result<PredictorOutput> {
        let features = self.forward_features(tape, p, rgb)?;
        let depth = depth_head(
            tape,
            features,
            p.get("head.weight")?,
            p.get("head.bias")?,
            self.kappa,
        )?;
        Ok(PredictorOutput { features, depth })
    }

    pub fn forward_depth(&self, tape: &Tape<T>, p: &BoundParams, rgb: Var) -> Result<Var> {
        Ok(self.forward(tape, p, rgb)?.depth)
    }

    /// Gradient-free evaluation returning `(features, depth)`.
    pub fn infer(&self, rgb: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let x = tape.constant(rgb.clone());
        let out = self.forward(&tape, &p, x)?;
        let f = (*tape.value(out.features)?).clone();
        let d = (*tape.value(out.depth)?).clone();
        Ok((f, d))
    }
}
