use crate::data::{augment_sample, select, DatasetSplit, DepthSample};
use crate::error::{Error, Result};
use crate::loss::{ssi_loss, ssi_loss_value};
use crate::metrics::DepthCap;
use crate::predictor::{BasePredictorModel, PredictorArch};
use crate::tensor::{Real, Tape};

use super::eval::{evaluate_depths, predict_predictor};
use super::{check_finite, diverged, derive_seed, epoch_batches, rng_for, stack_batch, OptimizerState, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorSpec {
    pub arch: PredictorArch,
    pub feature_channels: usize,
    pub kappa: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedPredictor<T> {
    pub index: usize,
    pub model: BasePredictorModel<T>,
    /// Loss over the training set before the first update.
    pub initial_loss: f64,
    /// Loss over the training set after the last update.
    pub final_loss: f64,
    /// Mean mini-batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// RMSE on the mixer split, used to rank predictors.
    pub val_rmse: f64,
}

/// Mean loss over fixed, unshuffled batches without augmentation.
fn dataset_loss<T: Real>(
    model: &BasePredictorModel<T>,
    samples: &[&DepthSample],
    cfg: &TrainConfig,
) -> Result<f64> {
    let preds = predict_predictor(model, samples)?;
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

/// Trains predictor `index` alone. The result depends only on `(index,
/// spec, data, cfg)`, never on what else is trained or in which order.
pub fn train_predictor<T: Real>(
    index: usize,
    spec: &PredictorSpec,
    train: &[&DepthSample],
    val: &[&DepthSample],
    cfg: &TrainConfig,
) -> Result<TrainedPredictor<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty base training set"));
    }
    let what = format!("predictor {index}");
    let init_seed = derive_seed(cfg.seed, "predictor-init", index as u64);
    let mut model = BasePredictorModel::<T>::build(spec.arch.clone(), spec.feature_channels, spec.kappa, init_seed)?;
    let mut opt = OptimizerState::new(&model.params, cfg.adam, cfg.base_lr, cfg.power, cfg.total_steps(train.len()))?;
    let mut rng = rng_for(cfg.seed, "predictor-data", index as u64);

    let initial_loss = dataset_loss(&model, train, cfg)?;
    check_finite(what.clone(), initial_loss)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(train.len(), cfg.batch_size, &mut rng);
        for batch in &batches {
            let owned: Vec<DepthSample> = match &cfg.augment {
                Some(policy) => batch
                    .iter()
                    .map(|&i| augment_sample(train[i], policy, &mut rng))
                    .collect::<Result<_>>()?,
                None => Vec::new(),
            };
            let refs: Vec<&DepthSample> = if cfg.augment.is_some() {
                owned.iter().collect()
            } else {
                batch.iter().map(|&i| train[i]).collect()
            };
            let (rgb, gt, mask) = stack_batch::<T>(&refs)?;
            let tape = Tape::new();
            let p = model.params.bind(&tape, true);
            let x = tape.constant(rgb);
            let depth = model.forward_depth(&tape, &p, x)?;
            let loss = ssi_loss(&tape, depth, &gt, &mask, &cfg.loss).map_err(|e| diverged(&what, e))?;
            check_finite(what.clone(), loss.breakdown.loss)?;
            sum += loss.breakdown.loss;
            let mut grads = tape.backward(loss.loss)?;
            let grads = model.params.collect_grads(&p, &mut grads)?;
            opt.step(&mut model.params, &grads).map_err(|e| Error::Diverged {
                what: what.clone(),
                detail: e.to_string(),
            })?;
        }
        epoch_losses.push(sum / batches.len() as f64);
    }
    let final_loss = dataset_loss(&model, train, cfg).map_err(|e| diverged(&what, e))?;
    check_finite(what, final_loss)?;

    let val_rmse = if val.is_empty() {
        f64::NAN
    } else {
        let preds = predict_predictor(&model, val)?;
        evaluate_depths(&preds, val, DepthCap::new(0.0, spec.kappa)?)?.rmse
    };
    Ok(TrainedPredictor {
        index,
        model,
        initial_loss,
        final_loss,
        epoch_losses,
        val_rmse,
    })
}

/// Trains one predictor per spec on `split.train_base` and scores each on
/// `split.train_mixer`. With `jobs > 1` predictors train on separate
/// threads; results are identical either way.
pub fn train_base_predictors<T: Real>(
    samples: &[DepthSample],
    split: &DatasetSplit,
    specs: &[PredictorSpec],
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<Vec<TrainedPredictor<T>>> {
    if specs.is_empty() {
        return Err(Error::invalid("need at least one predictor"));
    }
    let train = select(samples, &split.train_base)?;
    let val = select(samples, &split.train_mixer)?;
    if jobs <= 1 || specs.len() == 1 {
        return specs
            .iter()
            .enumerate()
            .map(|(i, spec)| train_predictor(i, spec, &train, &val, cfg))
            .collect();
    }
    let jobs = jobs.min(specs.len());
    let mut results: Vec<Option<Result<TrainedPredictor<T>>>> = (0..specs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let (train, val) = (&train, &val);
                scope.spawn(move || {
                    (j..specs.len())
                        .step_by(jobs)
                        .map(|i| (i, train_predictor(i, &specs[i], train, val, cfg)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("training thread panicked") {
                results[i] = Some(r);
            }
        }
    });
    results.into_iter().map(Option::unwrap).collect()
}
