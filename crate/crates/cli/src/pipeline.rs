//! The experiment stages behind each subcommand.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use tedepth::data::{
    depth_to_pointcloud, generate_synthetic_dataset, load_dataset, pca_principal_channel, pfm, pnm, save_dataset,
    select, split_dataset, CameraIntrinsics, DatasetSplit, DepthSample,
};
use tedepth::gradsuite::{run_gradient_suite, GradCase};
use tedepth::metrics::{range_rmse, DepthCap};
use tedepth::mixer::rank_predictors;
use tedepth::train::{
    evaluate_depths, predict_mixer, predict_predictor, predictor_outputs, train_base_predictors, train_mixer,
    Checkpoint, TrainedMixer, TrainedPredictor,
};
use tedepth::{BasePredictorModel, FusionLocation, MixerKind, MixerModel, Tape, Tensor};

use crate::config::{ExperimentConfig, MixerOrder};
use crate::report::{
    ablation_csv, metrics_csv, ranges_csv, write_file, AblationRow, Layout, ModelRow, RunManifest,
};

/// Training samples plus test samples, with the split over them.
pub struct Data {
    pub samples: Vec<DepthSample>,
    pub split: DatasetSplit,
}

impl Data {
    pub fn test(&self) -> Result<Vec<&DepthSample>> {
        Ok(select(&self.samples, &self.split.test)?)
    }

    pub fn find(&self, id: Option<&str>) -> Result<&DepthSample> {
        match id {
            Some(id) => self
                .samples
                .iter()
                .find(|s| s.id() == id)
                .ok_or_else(|| anyhow!("no sample with id {id}")),
            None => self.test()?.first().copied().ok_or_else(|| anyhow!("empty test set")),
        }
    }
}

/// Builds the train/test data in memory, exactly as `synth` writes it.
pub fn generate(cfg: &ExperimentConfig) -> Result<(Vec<DepthSample>, Vec<DepthSample>)> {
    let train = generate_synthetic_dataset(&cfg.scene)?;
    let test = generate_synthetic_dataset(&cfg.test_scene())?;
    Ok((train, test))
}

/// Splits training samples 7:1 and appends the test samples.
pub fn assemble(cfg: &ExperimentConfig, train: Vec<DepthSample>, test: Vec<DepthSample>) -> Result<Data> {
    let mut split = split_dataset(&train, cfg.train.seed)?;
    split.test = test.iter().map(|s| s.id().to_string()).collect();
    let mut samples = train;
    samples.extend(test);
    Ok(Data { samples, split })
}

pub fn load_data(layout: &Layout, cfg: &ExperimentConfig) -> Result<Data> {
    let train = load_dataset(layout.train_data())
        .with_context(|| format!("cannot load {} (run `synth` first)", layout.train_data().display()))?;
    let test = load_dataset(layout.test_data())
        .with_context(|| format!("cannot load {}", layout.test_data().display()))?;
    assemble(cfg, train, test)
}

pub fn synth(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let layout = Layout::new(&cfg.out);
    let mut run = RunManifest::begin("synth", cfg, &layout)?;
    let (train, test) = generate(cfg)?;
    for (dir, samples) in [(layout.train_data(), &train), (layout.test_data(), &test)] {
        save_dataset(&dir, samples)?;
        run.files.push(layout.relative(&dir.join(tedepth::data::MANIFEST_FILE)));
        for s in samples.iter() {
            for ext in ["rgb.ppm", "depth.pfm"] {
                run.files.push(layout.relative(&dir.join(format!("{}.{ext}", s.id()))));
            }
        }
    }
    run.finish(&layout)?;
    Ok(run)
}

fn predictor_checkpoint(p: &TrainedPredictor<f32>) -> Checkpoint {
    let mut ck = p.model.to_checkpoint();
    ck.metadata.insert("index".into(), p.index.to_string());
    ck.metadata.insert("initial_loss".into(), p.initial_loss.to_string());
    ck.metadata.insert("final_loss".into(), p.final_loss.to_string());
    ck.metadata.insert("val_rmse".into(), p.val_rmse.to_string());
    ck
}

pub fn train_base(cfg: &ExperimentConfig, jobs: usize) -> Result<(RunManifest, Vec<TrainedPredictor<f32>>)> {
    let layout = Layout::new(&cfg.out);
    let data = load_data(&layout, cfg)?;
    let mut run = RunManifest::begin("train-base", cfg, &layout)?;
    let trained = train_base_predictors::<f32>(&data.samples, &data.split, &cfg.predictor_specs(), &cfg.base_train(), jobs)?;
    let mut losses = String::from("model,epoch,loss\n");
    for p in &trained {
        let path = layout.predictor(p.index);
        crate::report::ensure_parent(&path)?;
        predictor_checkpoint(p).save(&path)?;
        run.checkpoints.push(layout.relative(&path));
        for (e, l) in p.epoch_losses.iter().enumerate() {
            losses.push_str(&format!("predictor{},{},{:.6}\n", p.index, e + 1, l));
        }
    }
    let path = layout.file("base_losses.csv");
    write_file(&path, losses)?;
    run.csvs.push(layout.relative(&path));
    run.finish(&layout)?;
    Ok((run, trained))
}

/// Loads the trained predictors named by the config, with their
/// validation RMSE on the mixer split.
pub fn load_predictors(layout: &Layout, cfg: &ExperimentConfig) -> Result<Vec<(BasePredictorModel<f32>, f64)>> {
    cfg.archs
        .iter()
        .enumerate()
        .map(|(i, arch)| {
            let path = layout.predictor(i);
            let ck = Checkpoint::load(&path)
                .with_context(|| format!("cannot load {} (run `train-base` first)", path.display()))?;
            let model = BasePredictorModel::<f32>::from_checkpoint(&ck)?;
            if &model.arch != arch || model.feature_channels != cfg.feature_channels || model.kappa != cfg.kappa {
                bail!("{} does not match predictor {i} of the config", path.display());
            }
            let rmse: f64 = ck
                .meta("val_rmse")?
                .parse()
                .map_err(|_| anyhow!("{}: bad val_rmse", path.display()))?;
            Ok((model, rmse))
        })
        .collect()
}

fn resolve_order(cfg: &ExperimentConfig, val_rmse: &[f64]) -> Result<Vec<usize>> {
    match &cfg.mixer_order {
        MixerOrder::Fixed(o) if o.len() == val_rmse.len() => Ok(o.clone()),
        _ => Ok(rank_predictors(val_rmse)?),
    }
}

/// Trains one mixer over `models`, which must be frozen predictors.
pub fn fit_mixer(
    cfg: &ExperimentConfig,
    data: &Data,
    models: &[BasePredictorModel<f32>],
    val_rmse: &[f64],
    kind: MixerKind,
    location: FusionLocation,
) -> Result<TrainedMixer<f32>> {
    let order = (kind == MixerKind::Ranked)
        .then(|| resolve_order(cfg, val_rmse))
        .transpose()?;
    let mc = cfg.mixer_config(kind, location, order);
    Ok(train_mixer(models, &data.samples, &data.split, &mc, &cfg.mixer_train())?)
}

pub fn train_mixer_stage(cfg: &ExperimentConfig) -> Result<(RunManifest, TrainedMixer<f32>)> {
    let layout = Layout::new(&cfg.out);
    let data = load_data(&layout, cfg)?;
    let loaded = load_predictors(&layout, cfg)?;
    let mut run = RunManifest::begin("train-mixer", cfg, &layout)?;
    let (models, rmse): (Vec<_>, Vec<_>) = loaded.into_iter().unzip();
    let trained = fit_mixer(cfg, &data, &models, &rmse, cfg.mixer_kind, cfg.mixer_location)?;
    let mut ck = trained.model.to_checkpoint();
    ck.metadata.insert("initial_loss".into(), trained.initial_loss.to_string());
    ck.metadata.insert("final_loss".into(), trained.final_loss.to_string());
    let path = layout.mixer();
    crate::report::ensure_parent(&path)?;
    ck.save(&path)?;
    run.checkpoints.push(layout.relative(&path));
    let path = layout.file("mixer_losses.csv");
    let mut losses = String::from("epoch,loss\n");
    for (e, l) in trained.epoch_losses.iter().enumerate() {
        losses.push_str(&format!("{},{:.6}\n", e + 1, l));
    }
    write_file(&path, losses)?;
    run.csvs.push(layout.relative(&path));
    run.finish(&layout)?;
    Ok((run, trained))
}

pub fn load_mixer(layout: &Layout, cfg: &ExperimentConfig) -> Result<MixerModel<f32>> {
    let path = layout.mixer();
    let ck = Checkpoint::load(&path).with_context(|| format!("cannot load {} (run `train-mixer` first)", path.display()))?;
    let mixer = MixerModel::<f32>::from_checkpoint(&ck)?;
    if mixer.predictors != cfg.archs.len() {
        bail!(
            "mixer fuses {} predictors, config lists {}",
            mixer.predictors,
            cfg.archs.len()
        );
    }
    Ok(mixer)
}

fn mixer_name(m: &MixerModel<f32>) -> String {
    format!("mixer-{}-{}", m.kind.code(), m.location.code())
}

fn flatten(preds: &[Tensor<f32>], samples: &[&DepthSample]) -> (Vec<f32>, Vec<f32>, Vec<bool>) {
    let p = preds.iter().flat_map(|t| t.data().iter().copied()).collect();
    let g = samples.iter().flat_map(|s| s.depth().data().iter().copied()).collect();
    let m = samples.iter().flat_map(|s| s.mask().iter().copied()).collect();
    (p, g, m)
}

pub fn eval(cfg: &ExperimentConfig, caps: Option<Vec<f64>>) -> Result<RunManifest> {
    let layout = Layout::new(&cfg.out);
    let data = load_data(&layout, cfg)?;
    let predictors = load_predictors(&layout, cfg)?;
    let mixer = load_mixer(&layout, cfg)?;
    let mut run = RunManifest::begin("eval", cfg, &layout)?;
    let test = data.test()?;
    let cap = DepthCap::new(0.0, cfg.kappa)?;
    let caps = caps.unwrap_or_else(|| cfg.caps.clone());

    let mut rows = Vec::new();
    let mut ranges = Vec::new();
    let models: Vec<_> = predictors.iter().map(|(m, _)| m.clone()).collect();
    let mut all_preds = Vec::new();
    for (i, m) in models.iter().enumerate() {
        all_preds.push((format!("predictor{i}"), m.param_count(), predict_predictor(m, &test)?));
    }
    let outputs = predictor_outputs(&models, &test)?;
    all_preds.push((mixer_name(&mixer), mixer.param_count(), predict_mixer(&mixer, &outputs)?));
    for (name, params, preds) in all_preds {
        let metrics = evaluate_depths(&preds, &test, cap)?;
        if !caps.is_empty() {
            let (p, g, m) = flatten(&preds, &test);
            ranges.push((name.clone(), range_rmse(&p, &g, &m, &caps)?));
        }
        rows.push(ModelRow { name, params, metrics });
    }
    let path = layout.file("metrics.csv");
    write_file(&path, metrics_csv(&rows))?;
    run.csvs.push(layout.relative(&path));
    if !caps.is_empty() {
        let path = layout.file("ranges.csv");
        write_file(&path, ranges_csv(&ranges))?;
        run.csvs.push(layout.relative(&path));
    }
    let (mixer_row, predictor_rows) = rows.split_last().expect("at least the mixer row");
    run.predictors = predictor_rows.iter().map(ModelRow::json).collect();
    run.mixer = Some(mixer_row.json());
    run.checkpoints = (0..models.len())
        .map(|i| layout.relative(&layout.predictor(i)))
        .chain([layout.relative(&layout.mixer())])
        .collect();
    run.finish(&layout)?;
    Ok(run)
}

/// Runs the trained ensemble on every sample of a dataset directory
/// (the test split by default) and writes fused depth maps as PFM.
pub fn fuse(cfg: &ExperimentConfig, input: Option<PathBuf>) -> Result<RunManifest> {
    let layout = Layout::new(&cfg.out);
    let input = input.unwrap_or_else(|| layout.test_data());
    let samples = load_dataset(&input).with_context(|| format!("cannot load {}", input.display()))?;
    let models: Vec<_> = load_predictors(&layout, cfg)?.into_iter().map(|(m, _)| m).collect();
    let mixer = load_mixer(&layout, cfg)?;
    let mut run = RunManifest::begin("fuse", cfg, &layout)?;
    let refs: Vec<&DepthSample> = samples.iter().collect();
    let preds = predict_mixer(&mixer, &predictor_outputs(&models, &refs)?)?;
    for (s, d) in samples.iter().zip(&preds) {
        let path = layout.file(&format!("fused/{}.depth.pfm", s.id()));
        crate::report::ensure_parent(&path)?;
        pfm::write(&path, d)?;
        run.files.push(layout.relative(&path));
    }
    run.finish(&layout)?;
    Ok(run)
}

pub struct AblationSpec {
    pub mixers: Vec<MixerKind>,
    pub locations: Vec<FusionLocation>,
    pub counts: Vec<usize>,
}

/// Uses saved predictors when all exist, otherwise trains and saves them.
fn ensure_predictors(layout: &Layout, cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<(BasePredictorModel<f32>, f64)>> {
    if (0..cfg.archs.len()).all(|i| layout.predictor(i).is_file()) {
        return load_predictors(layout, cfg);
    }
    let (_, trained) = train_base(cfg, jobs)?;
    Ok(trained.into_iter().map(|p| (p.model, p.val_rmse)).collect())
}

pub fn ablate(cfg: &ExperimentConfig, spec: &AblationSpec, jobs: usize) -> Result<RunManifest> {
    let layout = Layout::new(&cfg.out);
    let data = load_data(&layout, cfg)?;
    if let Some(&k) = spec.counts.iter().find(|&&k| k == 0 || k > cfg.archs.len()) {
        bail!("predictor count {k} outside 1..={}", cfg.archs.len());
    }
    let predictors = ensure_predictors(&layout, cfg, jobs)?;
    let mut run = RunManifest::begin("ablate", cfg, &layout)?;
    let test = data.test()?;
    let cap = DepthCap::new(0.0, cfg.kappa)?;
    let (h, w) = (cfg.scene.height, cfg.scene.width);
    let mut rows = Vec::new();
    for &k in &spec.counts {
        let models: Vec<_> = predictors[..k].iter().map(|(m, _)| m.clone()).collect();
        let rmse: Vec<f64> = predictors[..k].iter().map(|(_, r)| *r).collect();
        let outputs = predictor_outputs(&models, &test)?;
        for &kind in &spec.mixers {
            for &location in &spec.locations {
                let trained = fit_mixer(cfg, &data, &models, &rmse, kind, location)?;
                let m = &trained.model;
                let metrics = evaluate_depths(&predict_mixer(m, &outputs)?, &test, cap)?;
                rows.push(AblationRow {
                    mixer: kind.code().into(),
                    location: location.code().into(),
                    predictors: k,
                    fusion_params: m.fusion_param_count(),
                    head_params: m.head_param_count(),
                    mixer_macs: m.macs(h, w),
                    ensemble_params: m.param_count() + models.iter().map(|p| p.param_count()).sum::<usize>(),
                    ensemble_macs: m.macs(h, w) + models.iter().map(|p| p.macs(h, w)).sum::<u64>(),
                    metrics,
                });
            }
        }
    }
    let path = layout.file("ablation.csv");
    write_file(&path, ablation_csv(&rows))?;
    run.csvs.push(layout.relative(&path));
    run.checkpoints = (0..cfg.archs.len()).map(|i| layout.relative(&layout.predictor(i))).collect();
    run.finish(&layout)?;
    Ok(run)
}

/// Fused map F of the mixer for one sample, `[C, H, W]`.
fn fused_map(mixer: &MixerModel<f32>, outputs: &[(Tensor<f32>, Tensor<f32>)]) -> Result<Tensor<f32>> {
    let tape = Tape::new();
    let p = mixer.params.bind(&tape, false);
    let maps: Vec<_> = outputs
        .iter()
        .map(|(f, d)| {
            let t = match mixer.location {
                FusionLocation::Penultimate => f,
                FusionLocation::Final => d,
            };
            Ok(tape.constant(Tensor::stack(&[t])?))
        })
        .collect::<Result<_>>()?;
    let f = tape.value(mixer.fuse(&tape, &p, &maps)?)?;
    Ok(f.as_ref().clone().reshape(f.shape()[1..].to_vec())?)
}

/// Which model's output an export uses.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    GroundTruth,
    Mixer,
    Predictor(usize),
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gt" => Ok(Source::GroundTruth),
            "mixer" => Ok(Source::Mixer),
            _ => s
                .strip_prefix("predictor")
                .and_then(|i| i.parse().ok())
                .map(Source::Predictor)
                .ok_or_else(|| format!("expected gt, mixer or predictor<N>, got {s:?}")),
        }
    }
}

impl Source {
    fn name(&self) -> String {
        match self {
            Source::GroundTruth => "gt".into(),
            Source::Mixer => "mixer".into(),
            Source::Predictor(i) => format!("predictor{i}"),
        }
    }
}

fn export_path(layout: &Layout, output: Option<PathBuf>, source: &Source, id: &str, ext: &str) -> PathBuf {
    output.unwrap_or_else(|| layout.file(&format!("exports/{}-{id}.{ext}", source.name())))
}

fn record_export(run: &mut RunManifest, layout: &Layout, path: &Path) {
    if path.starts_with(&layout.root) {
        run.files.push(layout.relative(path));
    }
}

/// Principal component of a feature map, written as an 8-bit PGM.
pub fn export_heatmap(
    cfg: &ExperimentConfig,
    source: &Source,
    sample: Option<&str>,
    output: Option<PathBuf>,
) -> Result<(RunManifest, PathBuf)> {
    let layout = Layout::new(&cfg.out);
    let data = load_data(&layout, cfg)?;
    let s = data.find(sample)?;
    let models: Vec<_> = load_predictors(&layout, cfg)?.into_iter().map(|(m, _)| m).collect();
    let outputs = predictor_outputs(&models, &[s])?.remove(0);
    let features = match source {
        Source::GroundTruth => bail!("heatmaps need a model, not gt"),
        Source::Mixer => fused_map(&load_mixer(&layout, cfg)?, &outputs)?,
        Source::Predictor(i) => outputs
            .get(*i)
            .ok_or_else(|| anyhow!("no predictor {i}"))?
            .0
            .clone(),
    };
    let mut run = RunManifest::begin("export-heatmap", cfg, &layout)?;
    let path = export_path(&layout, output, source, s.id(), "pgm");
    crate::report::ensure_parent(&path)?;
    pnm::write(&path, &pca_principal_channel(&features)?, pnm::BitDepth::Eight)?;
    record_export(&mut run, &layout, &path);
    run.finish(&layout)?;
    Ok((run, path))
}

/// Colored point cloud of one sample's depth, as ASCII PLY.
pub fn export_pointcloud(
    cfg: &ExperimentConfig,
    source: &Source,
    sample: Option<&str>,
    output: Option<PathBuf>,
) -> Result<(RunManifest, PathBuf)> {
    let layout = Layout::new(&cfg.out);
    let data = load_data(&layout, cfg)?;
    let s = data.find(sample)?;
    let depth = match source {
        Source::GroundTruth => s.depth().clone(),
        _ => {
            let models: Vec<_> = load_predictors(&layout, cfg)?.into_iter().map(|(m, _)| m).collect();
            let outputs = predictor_outputs(&models, &[s])?;
            match source {
                Source::Mixer => predict_mixer(&load_mixer(&layout, cfg)?, &outputs)?.remove(0),
                Source::Predictor(i) => outputs[0]
                    .get(*i)
                    .ok_or_else(|| anyhow!("no predictor {i}"))?
                    .1
                    .clone(),
                Source::GroundTruth => unreachable!(),
            }
        }
    };
    let mut run = RunManifest::begin("export-pointcloud", cfg, &layout)?;
    let k = CameraIntrinsics::for_image(s.height(), s.width());
    let cloud = depth_to_pointcloud(&depth, s.rgb(), &k)?;
    let path = export_path(&layout, output, source, s.id(), "ply");
    write_file(&path, cloud.to_ply())?;
    record_export(&mut run, &layout, &path);
    run.finish(&layout)?;
    Ok((run, path))
}

pub fn gradcheck(seeds: u64) -> Result<Vec<GradCase>> {
    Ok(run_gradient_suite(0..seeds)?)
}
