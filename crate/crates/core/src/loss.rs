//! Scaled scale-invariant log-depth loss.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsiLossConfig {
    /// Output scale.
    pub alpha: f64,
    /// Variance focus; 1 makes the loss fully scale invariant.
    pub eta: f64,
}

impl Default for SsiLossConfig {
    fn default() -> Self {
        SsiLossConfig {
            alpha: 10.0,
            eta: 0.85,
        }
    }
}

impl SsiLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::invalid("ssi alpha must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid("ssi eta must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub loss: f64,
    /// Mean of g² over valid pixels.
    pub g_sq_mean: f64,
    /// Mean of g over valid pixels.
    pub g_mean: f64,
    pub valid_count: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SsiLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

fn valid_indices<T: Real>(pred: &[T], gt: &[T], mask: &[bool]) -> Result<Vec<usize>> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::shape(
            "ssi_loss",
            format!(
                "pred {} / gt {} / mask {} elements",
                pred.len(),
                gt.len(),
                mask.len()
            ),
        ));
    }
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(Error::invalid("ssi_loss: mask selects no pixel"));
    }
    for &i in &idx {
        if !(gt[i] > T::zero()) {
            return Err(Error::Domain {
                op: "ssi_loss (ground truth)",
                index: i,
                value: gt[i].f64(),
            });
        }
        if !(pred[i] > T::zero()) {
            return Err(Error::Domain {
                op: "ssi_loss (prediction)",
                index: i,
                value: pred[i].f64(),
            });
        }
    }
    Ok(idx)
}

/// Orders pixels by residual so every sum runs in the same order for any
/// permutation of the masked pixels.
fn canonical_order<T: Real>(pred: &[T], gt: &[T], mut idx: Vec<usize>) -> Vec<usize> {
    let key = |i: usize| (pred[i].f64().ln() - gt[i].f64().ln(), pred[i].f64());
    idx.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

/// `alpha * sqrt(mean(g²) - eta * mean(g)²)` with `g = ln(pred) - ln(gt)`
/// over masked pixels. The radicand is clamped at zero; the loss is
/// differentiable with respect to `pred`.
pub fn ssi_loss<T: Real>(
    tape: &Tape<T>,
    pred: Var,
    gt: &Tensor<T>,
    mask: &[bool],
    cfg: &SsiLossConfig,
) -> Result<SsiLoss> {
    cfg.validate()?;
    let pv = tape.value(pred)?;
    if pv.shape() != gt.shape() {
        return Err(Error::shape(
            "ssi_loss",
            format!("pred {:?} vs gt {:?}", pv.shape(), gt.shape()),
        ));
    }
    let idx = canonical_order(pv.data(), gt.data(), valid_indices(pv.data(), gt.data(), mask)?);
    let n = idx.len();
    let log_gt = Tensor::new([n], idx.iter().map(|&i| gt.data()[i].ln()).collect())?;

    let picked = tape.gather(pred, Rc::from(idx))?;
    let log_pred = tape.log(picked)?;
    let g = tape.sub(log_pred, tape.constant(log_gt))?;
    let g_sq = tape.mul(g, g)?;
    let m2 = tape.mean(g_sq)?;
    let m1 = tape.mean(g)?;
    // mean(g²) - eta·mean(g)² evaluated as var(g) + (1 - eta)·mean(g)²,
    // which stays exact for uniform-scale predictions.
    let centered = tape.sub(g, tape.expand(m1, &[n])?)?;
    let centered_sq = tape.mul(centered, centered)?;
    let var = tape.mean(centered_sq)?;
    let m1_sq = tape.mul(m1, m1)?;
    let bias = tape.scale(m1_sq, T::of(1.0 - cfg.eta))?;
    let radicand = tape.add(var, bias)?;
    let radicand = tape.clamp_min(radicand, T::zero())?;
    let root = tape.sqrt(radicand)?;
    let loss = tape.scale(root, T::of(cfg.alpha))?;

    let breakdown = LossBreakdown {
        loss: tape.value(loss)?.item().f64(),
        g_sq_mean: tape.value(m2)?.item().f64(),
        g_mean: tape.value(m1)?.item().f64(),
        valid_count: n,
    };
    Ok(SsiLoss { loss, breakdown })
}

/// Loss value only, evaluated in 64-bit without a tape.
pub fn ssi_loss_value<T: Real>(
    pred: &[T],
    gt: &[T],
    mask: &[bool],
    cfg: &SsiLossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let idx = canonical_order(pred, gt, valid_indices(pred, gt, mask)?);
    let n = idx.len() as f64;
    let g: Vec<f64> = idx
        .iter()
        .map(|&i| pred[i].f64().ln() - gt[i].f64().ln())
        .collect();
    let m1 = g.iter().sum::<f64>() / n;
    let m2 = g.iter().map(|v| v * v).sum::<f64>() / n;
    let var = g.iter().map(|v| (v - m1) * (v - m1)).sum::<f64>() / n;
    let loss = cfg.alpha * (var + (1.0 - cfg.eta) * m1 * m1).max(0.0).sqrt();
    Ok(LossBreakdown {
        loss,
        g_sq_mean: m2,
        g_mean: m1,
        valid_count: idx.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(pred: &[f64], gt: &[f64], mask: &[bool], cfg: SsiLossConfig) -> LossBreakdown {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::new([pred.len()], pred.to_vec()).unwrap());
        let g = Tensor::new([gt.len()], gt.to_vec()).unwrap();
        ssi_loss(&tape, p, &g, mask, &cfg).unwrap().breakdown
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let gt = [1.0, 2.5, 7.0, 9.9];
        let b = run(&gt, &gt, &[true; 4], SsiLossConfig::default());
        assert!(b.loss.abs() < 1e-9);
    }

    #[test]
    fn e_times_gt() {
        let gt = [1.0, 2.5, 7.0, 9.9];
        let pred: Vec<f64> = gt.iter().map(|v| v * std::f64::consts::E).collect();
        let b = run(&pred, &gt, &[true; 4], SsiLossConfig::default());
        assert!((b.loss - 10.0 * 0.15f64.sqrt()).abs() < 1e-9);
        assert!((b.loss - 3.8729833).abs() < 1e-6);
    }

    #[test]
    fn single_pixel_closed_form() {
        for c in [0.5, 1.7, 3.0] {
            let b = run(&[4.0 * c, 9.0], &[4.0, 1.0], &[true, false], SsiLossConfig::default());
            let expected = 10.0 * f64::ln(c).abs() * 0.15f64.sqrt();
            assert!((b.loss - expected).abs() < 1e-12);
            assert_eq!(b.valid_count, 1);
        }
    }

    #[test]
    fn value_path_matches_tape() {
        let gt = [1.0, 2.0, 3.0, 4.0, 5.0];
        let pred = [1.3, 1.9, 3.7, 3.1, 5.5];
        let mask = [true, true, false, true, true];
        let cfg = SsiLossConfig::default();
        let a = run(&pred, &gt, &mask, cfg);
        let b = ssi_loss_value(&pred, &gt, &mask, &cfg).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_and_bad_depth_rejected() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let g = Tensor::new([2], vec![1.0, 0.0]).unwrap();
        let cfg = SsiLossConfig::default();
        assert!(ssi_loss(&tape, p, &g, &[false, false], &cfg).is_err());
        assert!(matches!(
            ssi_loss(&tape, p, &g, &[true, true], &cfg),
            Err(Error::Domain { index: 1, .. })
        ));
        let p0 = tape.leaf(Tensor::new([2], vec![-1.0, 2.0]).unwrap());
        let g1 = Tensor::new([2], vec![1.0, 1.0]).unwrap();
        assert!(ssi_loss(&tape, p0, &g1, &[true, true], &cfg).is_err());
        // masked-out invalid pixels are fine
        assert!(ssi_loss(&tape, p, &g, &[true, false], &cfg).is_ok());
    }

    #[test]
    fn eta_one_is_scale_invariant() {
        let gt = [1.0, 2.0, 3.0, 8.0];
        let pred: Vec<f64> = gt.iter().map(|v| v * 3.3).collect();
        let cfg = SsiLossConfig {
            alpha: 10.0,
            eta: 1.0,
        };
        assert!(run(&pred, &gt, &[true; 4], cfg).loss < 1e-7);
    }
}
