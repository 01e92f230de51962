use crate::data::{select, DatasetSplit, DepthSample};
use crate::error::{Error, Result};
use crate::loss::{ssi_loss, ssi_loss_value};
use crate::metrics::{DepthCap, MetricsReport};
use crate::mixer::{MixerConfig, MixerKind, MixerModel};
use crate::predictor::{BasePredictorModel, PredictorOutput};
use crate::tensor::{Real, Tape, Tensor};

use super::eval::{evaluate_depths, predict_mixer, predictor_outputs, stack_outputs};
use super::{check_finite, diverged, derive_seed, epoch_batches, rng_for, stack_batch, OptimizerState, TrainConfig};

#[derive(Clone, Debug)]
pub struct TrainedMixer<T> {
    pub model: MixerModel<T>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    /// Metrics on `split.test` when it is non-empty.
    pub test_metrics: Option<MetricsReport>,
}

fn mixer_loss<T: Real>(
    mixer: &MixerModel<T>,
    outputs: &[Vec<(Tensor<T>, Tensor<T>)>],
    samples: &[&DepthSample],
    cfg: &TrainConfig,
) -> Result<f64> {
    let preds = predict_mixer(mixer, outputs)?;
    let mut total = 0.0;
    let mut batches = 0;
    for (chunk, pred) in samples.chunks(cfg.batch_size).zip(preds.chunks(cfg.batch_size)) {
        let p: Vec<T> = pred.iter().flat_map(|t| t.data().iter().copied()).collect();
        let g: Vec<T> = chunk.iter().flat_map(|s| s.depth().data().iter().map(|&v| T::of(v as f64))).collect();
        let m: Vec<bool> = chunk.iter().flat_map(|s| s.mask().iter().copied()).collect();
        total += ssi_loss_value(&p, &g, &m, &cfg.loss)?.loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Trains a mixer on `split.train_mixer` over the frozen `models`. The
/// predictors are only read: their outputs are computed once up front.
pub fn train_mixer<T: Real>(
    models: &[BasePredictorModel<T>],
    samples: &[DepthSample],
    split: &DatasetSplit,
    mixer_cfg: &MixerConfig,
    cfg: &TrainConfig,
) -> Result<TrainedMixer<T>> {
    cfg.validate()?;
    let first = models
        .first()
        .ok_or_else(|| Error::invalid("mixer training needs at least one predictor"))?;
    if models.iter().any(|m| m.feature_channels != first.feature_channels) {
        return Err(Error::invalid("predictors disagree on feature channel count"));
    }
    if mixer_cfg.kind == MixerKind::Ranked && mixer_cfg.order.is_none() {
        return Err(Error::invalid("the ranked mixer needs a predictor order"));
    }
    let train = select(samples, &split.train_mixer)?;
    if train.is_empty() {
        return Err(Error::invalid("empty mixer training set"));
    }
    let mut mixer = MixerModel::<T>::build(
        mixer_cfg,
        models.len(),
        first.feature_channels,
        derive_seed(cfg.seed, "mixer-init", 0),
    )?;
    let outputs = predictor_outputs(models, &train)?;
    let mut opt = OptimizerState::new(&mixer.params, cfg.adam, cfg.base_lr, cfg.power, cfg.total_steps(train.len()))?;
    let mut rng = rng_for(cfg.seed, "mixer-data", 0);
    let what = format!("{} mixer", mixer_cfg.kind.code());

    let initial_loss = mixer_loss(&mixer, &outputs, &train, cfg)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(train.len(), cfg.batch_size, &mut rng);
        for batch in &batches {
            let refs: Vec<&DepthSample> = batch.iter().map(|&i| train[i]).collect();
            let (_, gt, mask) = stack_batch::<T>(&refs)?;
            let chunk: Vec<Vec<(Tensor<T>, Tensor<T>)>> = batch.iter().map(|&i| outputs[i].clone()).collect();
            let stacked = stack_outputs(&chunk, models.len())?;
            let tape = Tape::new();
            let p = mixer.params.bind(&tape, true);
            let vars: Vec<PredictorOutput> = stacked
                .into_iter()
                .map(|(f, d)| PredictorOutput {
                    features: tape.constant(f),
                    depth: tape.constant(d),
                })
                .collect();
            let depth = mixer.forward(&tape, &p, &vars)?;
            let loss = ssi_loss(&tape, depth, &gt, &mask, &cfg.loss).map_err(|e| diverged(&what, e))?;
            check_finite(what.clone(), loss.breakdown.loss)?;
            sum += loss.breakdown.loss;
            let mut grads = tape.backward(loss.loss)?;
            let grads = mixer.params.collect_grads(&p, &mut grads)?;
            opt.step(&mut mixer.params, &grads).map_err(|e| Error::Diverged {
                what: what.clone(),
                detail: e.to_string(),
            })?;
        }
        epoch_losses.push(sum / batches.len() as f64);
    }
    let final_loss = mixer_loss(&mixer, &outputs, &train, cfg).map_err(|e| diverged(&what, e))?;
    check_finite(what, final_loss)?;

    let test_metrics = if split.test.is_empty() {
        None
    } else {
        let test = select(samples, &split.test)?;
        let out = predictor_outputs(models, &test)?;
        let preds = predict_mixer(&mixer, &out)?;
        Some(evaluate_depths(&preds, &test, DepthCap::new(0.0, mixer.kappa)?)?)
    };
    Ok(TrainedMixer {
        model: mixer,
        initial_loss,
        final_loss,
        epoch_losses,
        test_metrics,
    })
}
