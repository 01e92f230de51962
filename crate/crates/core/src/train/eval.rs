use crate::data::DepthSample;
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, DepthCap, MetricsReport};
use crate::mixer::MixerModel;
use crate::predictor::BasePredictorModel;
use crate::tensor::{Real, Tensor};

/// Chunk size for gradient-free evaluation.
const EVAL_BATCH: usize = 8;

fn unbatch<T: Real>(t: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let n = t.shape()[0];
    (0..n)
        .map(|i| t.batch_item(i)?.reshape(t.shape()[1..].to_vec()))
        .collect()
}

/// Per-sample `(features [C, H, W], depth [1, H, W])` for every predictor,
/// indexed `[sample][predictor]`.
pub fn predictor_outputs<T: Real>(
    models: &[BasePredictorModel<T>],
    samples: &[&DepthSample],
) -> Result<Vec<Vec<(Tensor<T>, Tensor<T>)>>> {
    let mut out: Vec<Vec<(Tensor<T>, Tensor<T>)>> = samples.iter().map(|_| Vec::new()).collect();
    for model in models {
        let mut k = 0;
        for chunk in samples.chunks(EVAL_BATCH) {
            let rgb: Vec<Tensor<T>> = chunk.iter().map(|s| s.rgb().cast()).collect();
            let rgb = Tensor::stack(&rgb.iter().collect::<Vec<_>>())?;
            let (f, d) = model.infer(&rgb)?;
            for (f, d) in unbatch(&f)?.into_iter().zip(unbatch(&d)?) {
                out[k].push((f, d));
                k += 1;
            }
        }
    }
    Ok(out)
}

pub fn predict_predictor<T: Real>(
    model: &BasePredictorModel<T>,
    samples: &[&DepthSample],
) -> Result<Vec<Tensor<T>>> {
    Ok(predictor_outputs(std::slice::from_ref(model), samples)?
        .into_iter()
        .map(|mut v| v.pop().unwrap().1)
        .collect())
}

/// Mixer depth `[1, H, W]` per sample from precomputed predictor outputs.
pub fn predict_mixer<T: Real>(
    mixer: &MixerModel<T>,
    outputs: &[Vec<(Tensor<T>, Tensor<T>)>],
) -> Result<Vec<Tensor<T>>> {
    let mut preds = Vec::with_capacity(outputs.len());
    for chunk in outputs.chunks(EVAL_BATCH) {
        let batched = stack_outputs(chunk, mixer.predictors)?;
        preds.extend(unbatch(&mixer.infer(&batched)?)?);
    }
    Ok(preds)
}

/// Turns `[sample][predictor]` outputs into one batched pair per predictor.
pub(crate) fn stack_outputs<T: Real>(
    chunk: &[Vec<(Tensor<T>, Tensor<T>)>],
    k: usize,
) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    (0..k)
        .map(|i| {
            let f: Vec<&Tensor<T>> = chunk.iter().map(|s| &s[i].0).collect();
            let d: Vec<&Tensor<T>> = chunk.iter().map(|s| &s[i].1).collect();
            Ok((Tensor::stack(&f)?, Tensor::stack(&d)?))
        })
        .collect()
}

/// Metrics pooled over every pixel of every sample.
pub fn evaluate_depths<T: Real>(
    preds: &[Tensor<T>],
    samples: &[&DepthSample],
    cap: DepthCap,
) -> Result<MetricsReport> {
    if preds.len() != samples.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let mut p = Vec::new();
    let mut g = Vec::new();
    let mut m = Vec::new();
    for (pred, s) in preds.iter().zip(samples) {
        if pred.numel() != s.depth().numel() {
            return Err(Error::shape(
                "evaluate",
                format!("prediction {:?} vs depth {:?}", pred.shape(), s.depth().shape()),
            ));
        }
        p.extend(pred.data().iter().map(|v| v.f64()));
        g.extend(s.depth().data().iter().map(|&v| v as f64));
        m.extend_from_slice(s.mask());
    }
    compute_metrics(&p, &g, &m, cap)
}
