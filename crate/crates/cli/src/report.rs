//! Output layout, CSV reports and the per-stage run manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use tedepth::metrics::{DepthCap, MetricsReport};

use crate::config::ExperimentConfig;

pub const RESOLVED_CONFIG: &str = "config.resolved";

/// Paths of every artifact under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data/train")
    }

    pub fn test_data(&self) -> PathBuf {
        self.root.join("data/test")
    }

    pub fn predictor(&self, i: usize) -> PathBuf {
        self.root.join(format!("checkpoints/predictor{i}.tedk"))
    }

    pub fn mixer(&self) -> PathBuf {
        self.root.join("checkpoints/mixer.tedk")
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn manifest(&self, stage: &str) -> PathBuf {
        self.root.join(format!("manifests/{stage}.json"))
    }

    /// Path relative to the output root, as recorded in manifests.
    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }
}

/// Creates the parent directory of `path`.
pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(())
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct MetricsJson {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub cap_min: f64,
    pub cap_max: f64,
    pub valid_count: usize,
}

impl From<&MetricsReport> for MetricsJson {
    fn from(m: &MetricsReport) -> Self {
        MetricsJson {
            abs_rel: m.abs_rel,
            sq_rel: m.sq_rel,
            rmse: m.rmse,
            rmse_log: m.rmse_log,
            log10: m.log10,
            d1: m.delta1,
            d2: m.delta2,
            d3: m.delta3,
            cap_min: m.cap.min,
            cap_max: m.cap.max,
            valid_count: m.valid_count,
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ModelMetrics {
    pub name: String,
    pub params: usize,
    pub metrics: MetricsJson,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub stage: String,
    pub config_hash: String,
    pub config: String,
    pub checkpoints: Vec<String>,
    pub csvs: Vec<String>,
    pub files: Vec<String>,
    pub predictors: Vec<ModelMetrics>,
    pub mixer: Option<ModelMetrics>,
}

impl RunManifest {
    /// Starts a manifest and writes the resolved config beside the outputs.
    pub fn begin(stage: &str, cfg: &ExperimentConfig, layout: &Layout) -> Result<Self> {
        let path = layout.file(RESOLVED_CONFIG);
        write_file(&path, cfg.render())?;
        let hash = cfg.hash();
        Ok(RunManifest {
            run_id: format!("{stage}-{}", &hash[..12]),
            stage: stage.to_string(),
            config_hash: hash,
            config: layout.relative(&path),
            checkpoints: Vec::new(),
            csvs: Vec::new(),
            files: Vec::new(),
            predictors: Vec::new(),
            mixer: None,
        })
    }

    /// Checks that every referenced file exists, then writes the manifest
    /// as JSON and returns its path.
    pub fn finish(&self, layout: &Layout) -> Result<PathBuf> {
        let all = std::iter::once(&self.config)
            .chain(&self.checkpoints)
            .chain(&self.csvs)
            .chain(&self.files);
        for rel in all {
            if !layout.root.join(rel).is_file() {
                bail!("manifest references missing file {rel}");
            }
        }
        let path = layout.manifest(&self.stage);
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        write_file(&path, json)?;
        Ok(path)
    }
}

/// `metrics.csv`: one row per model, prefixed by name and parameter count.
pub fn metrics_csv(rows: &[ModelRow]) -> String {
    let mut s = format!("model,params,{}\n", MetricsReport::CSV_HEADER);
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.name, r.params, r.metrics.csv_row()));
    }
    s
}

pub struct ModelRow {
    pub name: String,
    pub params: usize,
    pub metrics: MetricsReport,
}

impl ModelRow {
    pub fn json(&self) -> ModelMetrics {
        ModelMetrics {
            name: self.name.clone(),
            params: self.params,
            metrics: (&self.metrics).into(),
        }
    }
}

/// `ranges.csv`: RMSE per model and depth bin; empty bins leave the
/// metric columns blank.
pub fn ranges_csv(rows: &[(String, Vec<(DepthCap, Option<MetricsReport>)>)]) -> String {
    let mut s = String::from("model,cap_min,cap_max,rmse,abs_rel,d1,valid_count\n");
    for (name, bins) in rows {
        for (cap, m) in bins {
            match m {
                Some(m) => s.push_str(&format!(
                    "{name},{},{},{:.6},{:.6},{:.6},{}\n",
                    cap.min, cap.max, m.rmse, m.abs_rel, m.delta1, m.valid_count
                )),
                None => s.push_str(&format!("{name},{},{},,,,0\n", cap.min, cap.max)),
            }
        }
    }
    s
}

pub struct AblationRow {
    pub mixer: String,
    pub location: String,
    pub predictors: usize,
    pub fusion_params: usize,
    pub head_params: usize,
    pub mixer_macs: u64,
    pub ensemble_params: usize,
    pub ensemble_macs: u64,
    pub metrics: MetricsReport,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "mixer,location,predictors,fusion_params,head_params,mixer_macs,ensemble_params,ensemble_macs,{}\n",
        MetricsReport::CSV_HEADER
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.mixer,
            r.location,
            r.predictors,
            r.fusion_params,
            r.head_params,
            r.mixer_macs,
            r.ensemble_params,
            r.ensemble_macs,
            r.metrics.csv_row()
        ));
    }
    s
}
