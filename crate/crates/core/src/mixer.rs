//! Level-1 mixers that merge K predictor outputs into one depth map.
//!
//! Four fusion rules are provided: uniform summation (UWF), confidence
//! weighting (CGF), concatenation plus conv (CBF), and a ranked ConvGRU
//! (RBF) that consumes predictors from least to most accurate. Every mixer
//! ends with the same `kappa * sigmoid(conv3x3(F))` depth head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{init_conv, BoundParams, ParameterSet};
use crate::predictor::PredictorOutput;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MixerKind {
    /// Uniformly weighted fusion.
    Uniform,
    /// Confidence-guided fusion.
    Confidence,
    /// Concatenation-based fusion.
    Concat,
    /// Ranking-based ConvGRU fusion.
    Ranked,
}

impl MixerKind {
    pub const ALL: [MixerKind; 4] = [
        MixerKind::Uniform,
        MixerKind::Confidence,
        MixerKind::Concat,
        MixerKind::Ranked,
    ];

    pub fn code(self) -> &'static str {
        match self {
            MixerKind::Uniform => "uwf",
            MixerKind::Confidence => "cgf",
            MixerKind::Concat => "cbf",
            MixerKind::Ranked => "rbf",
        }
    }
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uwf" | "uniform" => Ok(MixerKind::Uniform),
            "cgf" | "confidence" => Ok(MixerKind::Confidence),
            "cbf" | "concat" => Ok(MixerKind::Concat),
            "rbf" | "ranked" => Ok(MixerKind::Ranked),
            other => Err(Error::invalid(format!("unknown mixer kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionLocation {
    /// Fuse the multi-channel penultimate feature maps.
    Penultimate,
    /// Fuse the single-channel depth maps.
    Final,
}

impl FusionLocation {
    pub fn code(self) -> &'static str {
        match self {
            FusionLocation::Penultimate => "pl",
            FusionLocation::Final => "fl",
        }
    }
}

impl fmt::Display for FusionLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for FusionLocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pl" | "penultimate" => Ok(FusionLocation::Penultimate),
            "fl" | "final" => Ok(FusionLocation::Final),
            other => Err(Error::invalid(format!("unknown fusion location `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixerConfig {
    pub kind: MixerKind,
    pub location: FusionLocation,
    pub kappa: f64,
    /// Divide the uniform sum by K. Off by default: the plain sum is used.
    pub average_uniform: bool,
    /// Predictor order for the ranked mixer, worst first.
    pub order: Option<Vec<usize>>,
}

impl MixerConfig {
    pub fn new(kind: MixerKind, location: FusionLocation, kappa: f64) -> Self {
        MixerConfig {
            kind,
            location,
            kappa,
            average_uniform: false,
            order: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixerModel<T> {
    pub kind: MixerKind,
    pub location: FusionLocation,
    pub kappa: f64,
    pub average_uniform: bool,
    pub order: Option<Vec<usize>>,
    /// Number of base predictors K.
    pub predictors: usize,
    /// Penultimate channel count C_f of the base predictors.
    pub feature_channels: usize,
    pub seed: u64,
    pub params: ParameterSet<T>,
}

fn check_permutation(order: &[usize], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    if order.len() != k {
        return Err(Error::invalid(format!(
            "order {order:?} is not a permutation of 0..{k}"
        )));
    }
    for &i in order {
        if i >= k || std::mem::replace(&mut seen[i], true) {
            return Err(Error::invalid(format!(
                "order {order:?} is not a permutation of 0..{k}"
            )));
        }
    }
    Ok(())
}

impl<T: Real> MixerModel<T> {
    pub fn build(cfg: &MixerConfig, predictors: usize, feature_channels: usize, seed: u64) -> Result<Self> {
        if predictors == 0 {
            return Err(Error::invalid("a mixer needs at least one predictor"));
        }
        if feature_channels == 0 {
            return Err(Error::invalid("feature_channels must be >= 1"));
        }
        if !(cfg.kappa > 0.0) {
            return Err(Error::invalid("kappa must be positive"));
        }
        if let Some(order) = &cfg.order {
            check_permutation(order, predictors)?;
        }
        let mut model = MixerModel {
            kind: cfg.kind,
            location: cfg.location,
            kappa: cfg.kappa,
            average_uniform: cfg.average_uniform,
            order: cfg.order.clone(),
            predictors,
            feature_channels,
            seed,
            params: ParameterSet::new(),
        };
        let c = model.fused_channels();
        let k = predictors;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = &mut model.params;
        match cfg.kind {
            MixerKind::Uniform => {}
            MixerKind::Confidence => {
                for i in 0..k {
                    init_conv(p, &format!("conf{i}"), c, c, &mut rng)?;
                }
            }
            MixerKind::Concat => init_conv(p, "concat", k * c, c, &mut rng)?,
            MixerKind::Ranked => {
                init_conv(p, "gru_z", 2 * c, c, &mut rng)?;
                init_conv(p, "gru_s", 2 * c, c, &mut rng)?;
                init_conv(p, "gru_h", 2 * c, c, &mut rng)?;
            }
        }
        let head_in = model.head_channels();
        init_conv(&mut model.params, "head", head_in, 1, &mut rng)?;
        Ok(model)
    }

    /// Channels per predictor map entering the fusion.
    pub fn fused_channels(&self) -> usize {
        match self.location {
            FusionLocation::Penultimate => self.feature_channels,
            FusionLocation::Final => 1,
        }
    }

    /// Channels of the fused map F fed to the depth head.
    pub fn head_channels(&self) -> usize {
        match self.kind {
            MixerKind::Ranked => self.predictors * self.fused_channels(),
            _ => self.fused_channels(),
        }
    }

    /// Learnable parameters of the fusion rule, excluding the depth head.
    pub fn fusion_param_count(&self) -> usize {
        self.params.count() - self.head_param_count()
    }

    pub fn head_param_count(&self) -> usize {
        self.params.count_prefixed("head.")
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Forward multiply-accumulates for one `h x w` image, fusion and head.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let c = self.fused_channels();
        let k = self.predictors;
        let mac = |cin, cout| crate::tensor::conv_macs(1, cin, cout, h, w);
        let fusion = match self.kind {
            MixerKind::Uniform => 0,
            MixerKind::Confidence => k as u64 * mac(c, c),
            MixerKind::Concat => mac(k * c, c),
            MixerKind::Ranked => 3 * k as u64 * mac(2 * c, c),
        };
        fusion + mac(self.head_channels(), 1)
    }

    fn conv_pair(p: &BoundParams, name: &str) -> Result<(Var, Var)> {
        Ok((p.get(&format!("{name}.weight"))?, p.get(&format!("{name}.bias"))?))
    }

    /// Fuses K maps of shape `[N, c, H, W]` into F.
    pub fn fuse(&self, tape: &Tape<T>, p: &BoundParams, maps: &[Var]) -> Result<Var> {
        if maps.len() != self.predictors {
            return Err(Error::invalid(format!(
                "mixer expects {} predictor maps, got {}",
                self.predictors,
                maps.len()
            )));
        }
        let c = self.fused_channels();
        for &m in maps {
            let s = tape.shape(m)?;
            if s.len() != 4 || s[1] != c {
                return Err(Error::shape(
                    "mixer",
                    format!("expected {c}-channel maps, got {s:?}"),
                ));
            }
        }
        match self.kind {
            MixerKind::Uniform => fuse_uniform(tape, maps, self.average_uniform),
            MixerKind::Confidence => {
                let convs = (0..self.predictors)
                    .map(|i| Self::conv_pair(p, &format!("conf{i}")))
                    .collect::<Result<Vec<_>>>()?;
                fuse_confidence(tape, maps, &convs)
            }
            MixerKind::Concat => {
                let (w, b) = Self::conv_pair(p, "concat")?;
                fuse_concat(tape, maps, w, b)
            }
            MixerKind::Ranked => {
                let order = self
                    .order
                    .as_deref()
                    .ok_or_else(|| Error::invalid("ranked mixer has no predictor order"))?;
                let gates = GruParams {
                    update: Self::conv_pair(p, "gru_z")?,
                    reset: Self::conv_pair(p, "gru_s")?,
                    candidate: Self::conv_pair(p, "gru_h")?,
                };
                fuse_ranked_gru(tape, maps, order, &gates)
            }
        }
    }

    pub fn depth_from_fused(&self, tape: &Tape<T>, p: &BoundParams, fused: Var) -> Result<Var> {
        let (w, b) = Self::conv_pair(p, "head")?;
        depth_head(tape, fused, w, b, self.kappa)
    }

    /// Fuses per-predictor outputs at the configured location and applies
    /// the depth head.
    pub fn forward(&self, tape: &Tape<T>, p: &BoundParams, outputs: &[PredictorOutput]) -> Result<Var> {
        let maps: Vec<Var> = outputs
            .iter()
            .map(|o| match self.location {
                FusionLocation::Penultimate => o.features,
                FusionLocation::Final => o.depth,
            })
            .collect();
        let fused = self.fuse(tape, p, &maps)?;
        self.depth_from_fused(tape, p, fused)
    }

    /// Gradient-free evaluation on precomputed `(features, depth)` pairs.
    pub fn infer(&self, outputs: &[(Tensor<T>, Tensor<T>)]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let vars: Vec<PredictorOutput> = outputs
            .iter()
            .map(|(f, d)| PredictorOutput {
                features: tape.constant(f.clone()),
                depth: tape.constant(d.clone()),
            })
            .collect();
        let d = self.forward(&tape, &p, &vars)?;
        Ok((*tape.value(d)?).clone())
    }
}

/// `F = sum_i f_i`, or the mean when `average` is set. Bitwise invariant
/// to the order of `features`.
pub fn fuse_uniform<T: Real>(tape: &Tape<T>, features: &[Var], average: bool) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::invalid("uniform fusion of zero maps"));
    }
    if features.len() == 1 {
        return Ok(features[0]);
    }
    let sum = tape.add_n(features)?;
    if average {
        tape.scale(sum, T::of(1.0 / features.len() as f64))
    } else {
        Ok(sum)
    }
}

/// `C_i = sigmoid(conv_i(f_i))`, one conv per predictor slot.
pub fn confidence_maps<T: Real>(
    tape: &Tape<T>,
    features: &[Var],
    convs: &[(Var, Var)],
) -> Result<Vec<Var>> {
    if convs.len() != features.len() {
        return Err(Error::invalid(format!(
            "confidence fusion needs {} convs, got {}",
            features.len(),
            convs.len()
        )));
    }
    features
        .iter()
        .zip(convs)
        .map(|(&f, &(w, b))| {
            let logits = tape.conv2d_3x3(f, w, Some(b))?;
            tape.sigmoid(logits)
        })
        .collect()
}

/// `F = sum_i C_i ⊙ f_i`.
pub fn fuse_confidence<T: Real>(tape: &Tape<T>, features: &[Var], convs: &[(Var, Var)]) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::invalid("confidence fusion of zero maps"));
    }
    let conf = confidence_maps(tape, features, convs)?;
    let weighted = features
        .iter()
        .zip(&conf)
        .map(|(&f, &c)| tape.mul(c, f))
        .collect::<Result<Vec<_>>>()?;
    if weighted.len() == 1 {
        return Ok(weighted[0]);
    }
    tape.add_n(&weighted)
}

/// `F = elu(conv([f_1, ..., f_K]))`.
pub fn fuse_concat<T: Real>(tape: &Tape<T>, features: &[Var], weight: Var, bias: Var) -> Result<Var> {
    let cat = tape.concat_channels(features)?;
    let y = tape.conv2d_3x3(cat, weight, Some(bias))?;
    tape.elu(y)
}

/// Predictor indices from worst to best: descending RMSE, ties broken by
/// ascending index.
pub fn rank_predictors(rmse: &[f64]) -> Result<Vec<usize>> {
    if let Some(i) = rmse.iter().position(|v| v.is_nan()) {
        return Err(Error::invalid(format!("RMSE of predictor {i} is NaN")));
    }
    let mut order: Vec<usize> = (0..rmse.len()).collect();
    order.sort_by(|&a, &b| rmse[b].total_cmp(&rmse[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Conv weight/bias pairs of the three ConvGRU gates, shared across steps.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub update: (Var, Var),
    pub reset: (Var, Var),
    pub candidate: (Var, Var),
}

/// One ConvGRU step: returns the new hidden state.
pub fn gru_step<T: Real>(tape: &Tape<T>, h: Var, f: Var, gates: &GruParams) -> Result<Var> {
    let hf = tape.concat_channels(&[h, f])?;
    let z = tape.conv2d_3x3(hf, gates.update.0, Some(gates.update.1))?;
    let z = tape.sigmoid(z)?;
    let s = tape.conv2d_3x3(hf, gates.reset.0, Some(gates.reset.1))?;
    let s = tape.sigmoid(s)?;
    let sh = tape.mul(s, h)?;
    let shf = tape.concat_channels(&[sh, f])?;
    let cand = tape.conv2d_3x3(shf, gates.candidate.0, Some(gates.candidate.1))?;
    let cand = tape.tanh(cand)?;
    let keep = tape.one_minus(z)?;
    let kept = tape.mul(keep, h)?;
    let fresh = tape.mul(z, cand)?;
    tape.add(kept, fresh)
}

/// Runs the ConvGRU over `features` in `order` from a zero hidden state
/// and returns all hidden states concatenated along channels.
pub fn fuse_ranked_gru<T: Real>(
    tape: &Tape<T>,
    features: &[Var],
    order: &[usize],
    gates: &GruParams,
) -> Result<Var> {
    check_permutation(order, features.len())?;
    let first = tape.shape(features[0])?;
    let mut h = tape.constant(Tensor::zeros(first));
    let mut states = Vec::with_capacity(order.len());
    for &i in order {
        h = gru_step(tape, h, features[i], gates)?;
        states.push(h);
    }
    tape.concat_channels(&states)
}

/// `kappa * sigmoid(conv3x3(F))`, strictly inside `(0, kappa)`.
pub fn depth_head<T: Real>(tape: &Tape<T>, fused: Var, weight: Var, bias: Var, kappa: f64) -> Result<Var> {
    let y = tape.conv2d_3x3(fused, weight, Some(bias))?;
    let y = tape.sigmoid(y)?;
    tape.scale(y, T::of(kappa))
}
