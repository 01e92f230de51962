use tedepth::data::{generate_synthetic_dataset, select, split_dataset, DatasetSplit, DepthSample, SceneConfig};
use tedepth::mixer::rank_predictors;
use tedepth::train::{
    train_base_predictors, train_mixer, train_predictor, PredictorSpec, TrainConfig, TrainedPredictor,
};
use tedepth::{FusionLocation, MixerConfig, MixerKind, PredictorArch};

fn toy() -> (Vec<DepthSample>, DatasetSplit) {
    let scene = SceneConfig {
        count: 24,
        height: 12,
        width: 12,
        seed: 5,
        ..SceneConfig::default()
    };
    let mut samples = generate_synthetic_dataset(&scene).unwrap();
    let mut split = split_dataset(&samples, 1).unwrap();
    let test = generate_synthetic_dataset(&SceneConfig {
        count: 4,
        seed: 6,
        id_prefix: "t".into(),
        ..scene
    })
    .unwrap();
    split.test = test.iter().map(|s| s.id().to_string()).collect();
    samples.extend(test);
    (samples, split)
}

fn specs() -> Vec<PredictorSpec> {
    ["w4:d1.2:elu", "w4:d1:tanh"]
        .iter()
        .map(|a| PredictorSpec {
            arch: a.parse::<PredictorArch>().unwrap(),
            feature_channels: 3,
            kappa: 10.0,
        })
        .collect()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        base_lr: 1e-2,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn trained() -> (Vec<DepthSample>, DatasetSplit, Vec<TrainedPredictor<f32>>) {
    let (samples, split) = toy();
    let preds = train_base_predictors(&samples, &split, &specs(), &cfg(), 1).unwrap();
    (samples, split, preds)
}

#[test]
fn predictors_train_independently_of_order_and_threads() {
    let (samples, split, preds) = trained();
    let train = select(&samples, &split.train_base).unwrap();
    let val = select(&samples, &split.train_mixer).unwrap();
    let specs = specs();
    let second_first: TrainedPredictor<f32> = train_predictor(1, &specs[1], &train, &val, &cfg()).unwrap();
    let then_first: TrainedPredictor<f32> = train_predictor(0, &specs[0], &train, &val, &cfg()).unwrap();
    assert_eq!(second_first.model, preds[1].model);
    assert_eq!(then_first.model, preds[0].model);
    let threaded = train_base_predictors::<f32>(&samples, &split, &specs, &cfg(), 2).unwrap();
    for (a, b) in threaded.iter().zip(&preds) {
        assert_eq!(a.model.params.digest(), b.model.params.digest());
        assert_eq!(a.val_rmse.to_bits(), b.val_rmse.to_bits());
    }
}

#[test]
fn training_reduces_loss_and_scores_on_mixer_split() {
    let (_, _, preds) = trained();
    for p in &preds {
        assert!(p.final_loss < p.initial_loss, "{p:?}");
        assert_eq!(p.epoch_losses.len(), 3);
        assert!(p.val_rmse.is_finite() && p.val_rmse > 0.0);
    }
}

#[test]
fn mixers_leave_predictors_frozen() {
    let (samples, split, preds) = trained();
    let models: Vec<_> = preds.iter().map(|p| p.model.clone()).collect();
    let before: Vec<_> = models.iter().map(|m| m.params.digest()).collect();
    let order = rank_predictors(&preds.iter().map(|p| p.val_rmse).collect::<Vec<_>>()).unwrap();
    for kind in MixerKind::ALL {
        for location in [FusionLocation::Penultimate, FusionLocation::Final] {
            let mut mc = MixerConfig::new(kind, location, 10.0);
            mc.order = Some(order.clone());
            let m = train_mixer(&models, &samples, &split, &mc, &cfg()).unwrap();
            assert!(m.test_metrics.is_some());
            assert!(m.final_loss.is_finite());
        }
    }
    let after: Vec<_> = models.iter().map(|m| m.params.digest()).collect();
    assert_eq!(before, after);
}

#[test]
fn uniform_mixer_trains_only_its_head() {
    let (samples, split, preds) = trained();
    let models: Vec<_> = preds.iter().map(|p| p.model.clone()).collect();
    let mc = MixerConfig::new(MixerKind::Uniform, FusionLocation::Penultimate, 10.0);
    let m = train_mixer(&models, &samples, &split, &mc, &cfg()).unwrap();
    assert!(m.model.params.names().all(|n| n.starts_with("head.")));
    assert_eq!(m.model.fusion_param_count(), 0);
}

#[test]
fn mixer_training_is_deterministic() {
    let (samples, split, preds) = trained();
    let models: Vec<_> = preds.iter().map(|p| p.model.clone()).collect();
    let mut mc = MixerConfig::new(MixerKind::Ranked, FusionLocation::Penultimate, 10.0);
    mc.order = Some(vec![1, 0]);
    let a = train_mixer(&models, &samples, &split, &mc, &cfg()).unwrap();
    let b = train_mixer(&models, &samples, &split, &mc, &cfg()).unwrap();
    assert_eq!(
        a.model.to_checkpoint().encode().unwrap(),
        b.model.to_checkpoint().encode().unwrap()
    );
}

#[test]
fn ranked_mixer_requires_an_order() {
    let (samples, split, preds) = trained();
    let models: Vec<_> = preds.iter().map(|p| p.model.clone()).collect();
    let mc = MixerConfig::new(MixerKind::Ranked, FusionLocation::Penultimate, 10.0);
    assert!(train_mixer(&models, &samples, &split, &mc, &cfg()).is_err());
}

#[test]
fn single_predictor_ensemble() {
    let (samples, split) = toy();
    let preds = train_base_predictors::<f32>(&samples, &split, &specs()[..1], &cfg(), 4).unwrap();
    assert_eq!(preds.len(), 1);
    let models = vec![preds[0].model.clone()];
    let mc = MixerConfig::new(MixerKind::Confidence, FusionLocation::Penultimate, 10.0);
    assert!(train_mixer(&models, &samples, &split, &mc, &cfg()).is_ok());
}

#[test]
fn divergence_names_the_predictor() {
    let (samples, split) = toy();
    let wild = TrainConfig {
        base_lr: 1e30,
        ..cfg()
    };
    let err = train_base_predictors::<f32>(&samples, &split, &specs(), &wild, 1).unwrap_err();
    assert!(err.to_string().contains("predictor 0"), "{err}");
}
