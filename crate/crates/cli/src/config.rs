//! Line-based experiment configuration: `key = value`, `#` comments,
//! dotted keys. Every key has a default; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use tedepth::data::{AugmentPolicy, SceneConfig};
use tedepth::train::{PredictorSpec, TrainConfig};
use tedepth::{FusionLocation, MixerConfig, MixerKind, PredictorArch};

/// Environment variable that replaces the configured output directory.
pub const OUT_ENV: &str = "TEDK_OUT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("{key}: {msg}")]
    Value { key: String, msg: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum MixerOrder {
    /// Rank by validation RMSE, worst first.
    Auto,
    Fixed(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    pub scene: SceneConfig,
    pub test_count: usize,
    pub archs: Vec<PredictorArch>,
    pub feature_channels: usize,
    pub kappa: f64,
    pub train: TrainConfig,
    pub augment: AugmentPolicy,
    pub augment_enabled: bool,
    pub mixer_kind: MixerKind,
    pub mixer_location: FusionLocation,
    pub mixer_average: bool,
    pub mixer_order: MixerOrder,
    /// Mixer learning rate; `None` reuses `train.lr`.
    pub mixer_lr: Option<f64>,
    /// Upper bounds of consecutive depth bins for range metrics.
    pub caps: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out: PathBuf::from("runs/default"),
            scene: SceneConfig {
                count: 240,
                ..SceneConfig::default()
            },
            test_count: 40,
            archs: ["local", "dilated", "context"]
                .iter()
                .map(|n| PredictorArch::preset(n).unwrap())
                .collect(),
            feature_channels: tedepth::predictor::DEFAULT_FEATURE_CHANNELS,
            kappa: 10.0,
            train: TrainConfig::default(),
            augment: AugmentPolicy::default(),
            augment_enabled: false,
            mixer_kind: MixerKind::Ranked,
            mixer_location: FusionLocation::Penultimate,
            mixer_average: false,
            mixer_order: MixerOrder::Auto,
            mixer_lr: None,
            caps: Vec::new(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
where
    V::Err: std::fmt::Display,
{
    value.parse().map_err(|e: V::Err| ConfigError::Value {
        key: key.to_string(),
        msg: format!("cannot parse {value:?}: {e}"),
    })
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>, ConfigError>
where
    V::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<V: ToString>(items: &[V]) -> String {
    items.iter().map(V::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("bad key {key:?}"),
                });
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_text(&text)
    }

    /// Applies `TEDK_OUT` when set.
    pub fn with_env_out(mut self, env: Option<String>) -> Self {
        if let Some(out) = env.filter(|v| !v.is_empty()) {
            self.out = PathBuf::from(out);
        }
        self
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "out" => self.out = PathBuf::from(v),
            "scene.count" => self.scene.count = parse(key, v)?,
            "scene.test_count" => self.test_count = parse(key, v)?,
            "scene.height" => self.scene.height = parse(key, v)?,
            "scene.width" => self.scene.width = parse(key, v)?,
            "scene.max_depth" => self.scene.max_depth = parse(key, v)?,
            "scene.seed" => self.scene.seed = parse(key, v)?,
            "scene.planes" => self.scene.mix.planes = parse(key, v)?,
            "scene.boxes" => self.scene.mix.boxes = parse(key, v)?,
            "scene.spheres" => self.scene.mix.spheres = parse(key, v)?,
            "predictors.archs" => self.archs = parse_list(key, v)?,
            "predictors.feature_channels" => self.feature_channels = parse(key, v)?,
            "kappa" => self.kappa = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.base_lr = parse(key, v)?,
            "train.power" => self.train.power = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.beta1" => self.train.adam.beta1 = parse(key, v)?,
            "train.beta2" => self.train.adam.beta2 = parse(key, v)?,
            "train.eps" => self.train.adam.eps = parse(key, v)?,
            "train.weight_decay" => self.train.adam.weight_decay = parse(key, v)?,
            "loss.alpha" => self.train.loss.alpha = parse(key, v)?,
            "loss.eta" => self.train.loss.eta = parse(key, v)?,
            "augment.enabled" => self.augment_enabled = parse(key, v)?,
            "augment.flip_prob" => self.augment.flip_prob = parse(key, v)?,
            "augment.max_rotation_deg" => self.augment.max_rotation_deg = parse(key, v)?,
            "augment.jitter_prob" => self.augment.jitter_prob = parse(key, v)?,
            "augment.jitter_range" => self.augment.jitter_range = parse(key, v)?,
            "augment.crop" => {
                self.augment.crop = match v {
                    "none" => None,
                    _ => {
                        let (h, w) = v.split_once('x').ok_or_else(|| ConfigError::Value {
                            key: key.to_string(),
                            msg: format!("expected `none` or `HxW`, got {v:?}"),
                        })?;
                        Some((parse(key, h)?, parse(key, w)?))
                    }
                }
            }
            "mixer.kind" => self.mixer_kind = parse(key, v)?,
            "mixer.location" => self.mixer_location = parse(key, v)?,
            "mixer.average" => self.mixer_average = parse(key, v)?,
            "mixer.order" => {
                self.mixer_order = match v {
                    "auto" => MixerOrder::Auto,
                    _ => MixerOrder::Fixed(parse_list(key, v)?),
                }
            }
            "mixer.lr" => {
                self.mixer_lr = match v {
                    "auto" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "eval.caps" => self.caps = parse_list(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, msg: &dyn std::fmt::Display| ConfigError::Value {
            key: key.to_string(),
            msg: msg.to_string(),
        };
        self.scene.validate().map_err(|e| bad("scene", &e))?;
        self.train.validate().map_err(|e| bad("train", &e))?;
        if self.archs.is_empty() {
            return Err(bad("predictors.archs", &"empty list"));
        }
        if self.test_count == 0 || self.feature_channels == 0 || !(self.kappa > 0.0) {
            return Err(bad(
                "config",
                &"scene.test_count, predictors.feature_channels and kappa must be positive",
            ));
        }
        if let MixerOrder::Fixed(order) = &self.mixer_order {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..self.archs.len()).collect::<Vec<_>>() {
                return Err(bad(
                    "mixer.order",
                    &format!("{order:?} is not a permutation of the predictors"),
                ));
            }
        }
        if matches!(self.mixer_lr, Some(lr) if !(lr > 0.0)) {
            return Err(bad("mixer.lr", &"must be positive"));
        }
        if self.caps.windows(2).any(|w| !(w[0] < w[1])) || self.caps.iter().any(|c| !(*c > 0.0)) {
            return Err(bad("eval.caps", &"caps must be positive and increasing"));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order. Parsing the
    /// result gives back the same configuration.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("out", self.out.display().to_string());
        kv("scene.count", self.scene.count.to_string());
        kv("scene.test_count", self.test_count.to_string());
        kv("scene.height", self.scene.height.to_string());
        kv("scene.width", self.scene.width.to_string());
        kv("scene.max_depth", self.scene.max_depth.to_string());
        kv("scene.seed", self.scene.seed.to_string());
        kv("scene.planes", self.scene.mix.planes.to_string());
        kv("scene.boxes", self.scene.mix.boxes.to_string());
        kv("scene.spheres", self.scene.mix.spheres.to_string());
        kv("predictors.archs", join(&self.archs));
        kv("predictors.feature_channels", self.feature_channels.to_string());
        kv("kappa", self.kappa.to_string());
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.lr", self.train.base_lr.to_string());
        kv("train.power", self.train.power.to_string());
        kv("train.seed", self.train.seed.to_string());
        kv("train.beta1", self.train.adam.beta1.to_string());
        kv("train.beta2", self.train.adam.beta2.to_string());
        kv("train.eps", self.train.adam.eps.to_string());
        kv("train.weight_decay", self.train.adam.weight_decay.to_string());
        kv("loss.alpha", self.train.loss.alpha.to_string());
        kv("loss.eta", self.train.loss.eta.to_string());
        kv("augment.enabled", self.augment_enabled.to_string());
        kv("augment.flip_prob", self.augment.flip_prob.to_string());
        kv("augment.max_rotation_deg", self.augment.max_rotation_deg.to_string());
        kv("augment.jitter_prob", self.augment.jitter_prob.to_string());
        kv("augment.jitter_range", self.augment.jitter_range.to_string());
        kv(
            "augment.crop",
            match self.augment.crop {
                None => "none".into(),
                Some((h, w)) => format!("{h}x{w}"),
            },
        );
        kv("mixer.kind", self.mixer_kind.code().into());
        kv("mixer.location", self.mixer_location.code().into());
        kv("mixer.average", self.mixer_average.to_string());
        kv(
            "mixer.order",
            match &self.mixer_order {
                MixerOrder::Auto => "auto".into(),
                MixerOrder::Fixed(o) => join(o),
            },
        );
        kv(
            "mixer.lr",
            self.mixer_lr.map_or_else(|| "auto".into(), |lr| lr.to_string()),
        );
        kv("eval.caps", join(&self.caps));
        s
    }

    /// SHA-256 of the rendered configuration, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.render().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn test_scene(&self) -> SceneConfig {
        SceneConfig {
            count: self.test_count,
            seed: tedepth::train::derive_seed(self.scene.seed, "test-scenes", 0),
            id_prefix: "t".into(),
            ..self.scene.clone()
        }
    }

    pub fn predictor_specs(&self) -> Vec<PredictorSpec> {
        self.archs
            .iter()
            .map(|arch| PredictorSpec {
                arch: arch.clone(),
                feature_channels: self.feature_channels,
                kappa: self.kappa,
            })
            .collect()
    }

    pub fn base_train(&self) -> TrainConfig {
        TrainConfig {
            augment: self.augment_enabled.then(|| self.augment.clone()),
            ..self.train.clone()
        }
    }

    pub fn mixer_train(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.mixer_lr.unwrap_or(self.train.base_lr),
            augment: None,
            ..self.train.clone()
        }
    }

    pub fn mixer_config(&self, kind: MixerKind, location: FusionLocation, order: Option<Vec<usize>>) -> MixerConfig {
        MixerConfig {
            kind,
            location,
            kappa: self.kappa,
            average_uniform: self.mixer_average,
            order,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parses_back() {
        let text = "\
# demo
out = /tmp/x   # trailing comment
scene.count = 64
predictors.archs = local, w4:d1.2:tanh
mixer.kind = cgf
mixer.order = 1,0
mixer.lr = 0.02
augment.crop = 24x20
eval.caps = 2,4,6.5
";
        let cfg = ExperimentConfig::parse_text(text).unwrap();
        assert_eq!(cfg.scene.count, 64);
        assert_eq!(cfg.archs[1].to_string(), "w4:d1.2:tanh");
        assert_eq!(cfg.mixer_order, MixerOrder::Fixed(vec![1, 0]));
        assert_eq!(cfg.augment.crop, Some((24, 20)));
        assert_eq!(ExperimentConfig::parse_text(&cfg.render()).unwrap(), cfg);
        assert_eq!(ExperimentConfig::default().mixer_train().base_lr, 1e-4);
        assert_eq!(cfg.mixer_train().base_lr, 0.02);
    }

    #[test]
    fn unknown_keys_and_bad_lines_rejected() {
        assert!(matches!(
            ExperimentConfig::parse_text("mixer.knd = rbf"),
            Err(ConfigError::UnknownKey(k)) if k == "mixer.knd"
        ));
        assert!(matches!(
            ExperimentConfig::parse_text("\n\njust words"),
            Err(ConfigError::Syntax { line: 3, .. })
        ));
        assert!(ExperimentConfig::parse_text("train.epochs = zero").is_err());
        assert!(ExperimentConfig::parse_text("mixer.order = 0,0,1").is_err());
        assert!(ExperimentConfig::parse_text("eval.caps = 4,2").is_err());
    }

    #[test]
    fn env_overrides_out() {
        let cfg = ExperimentConfig::default().with_env_out(Some("/elsewhere".into()));
        assert_eq!(cfg.out, PathBuf::from("/elsewhere"));
        let cfg = cfg.with_env_out(None);
        assert_eq!(cfg.out, PathBuf::from("/elsewhere"));
    }
}
