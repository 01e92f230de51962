//! Standard monocular depth metrics and depth-range capping.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Predictions are floored here before any log-based metric.
pub const MIN_EVAL_DEPTH: f64 = 1e-3;

/// Evaluation depth range `(min, max]` in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthCap {
    pub min: f64,
    pub max: f64,
}

impl DepthCap {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min < max) || min < 0.0 {
            return Err(Error::invalid(format!("bad depth cap ({min}, {max}]")));
        }
        Ok(DepthCap { min, max })
    }

    pub fn contains(&self, d: f64) -> bool {
        d > self.min && d <= self.max
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub cap: DepthCap,
    pub valid_count: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "abs_rel,sq_rel,rmse,rmse_log,log10,d1,d2,d3,cap_min,cap_max,valid_count";

    /// One CSV row in the column order of [`MetricsReport::CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.log10,
            self.delta1,
            self.delta2,
            self.delta3,
            self.cap.min,
            self.cap.max,
            self.valid_count
        )
    }
}

fn check_lengths(pred: usize, gt: usize, mask: usize) -> Result<()> {
    if pred != gt || pred != mask {
        return Err(Error::shape(
            "metrics",
            format!("pred {pred} / gt {gt} / mask {mask} elements"),
        ));
    }
    Ok(())
}

/// Pools every pixel with `mask` set and ground truth inside `cap`.
/// Predictions are clamped into `[MIN_EVAL_DEPTH, cap.max]` first.
pub fn compute_metrics<T: Real>(
    pred: &[T],
    gt: &[T],
    mask: &[bool],
    cap: DepthCap,
) -> Result<MetricsReport> {
    check_lengths(pred.len(), gt.len(), mask.len())?;
    let mut acc = [0.0f64; 8];
    let mut n = 0usize;
    let thresholds = [1.25f64, 1.25f64.powi(2), 1.25f64.powi(3)];
    for i in 0..pred.len() {
        let d = gt[i].f64();
        if !mask[i] || !cap.contains(d) {
            continue;
        }
        let p = pred[i].f64().clamp(MIN_EVAL_DEPTH, cap.max);
        let diff = p - d;
        acc[0] += diff.abs() / d;
        acc[1] += diff * diff / d;
        acc[2] += diff * diff;
        let ln_diff = p.ln() - d.ln();
        acc[3] += ln_diff * ln_diff;
        acc[4] += (p.log10() - d.log10()).abs();
        let ratio = (p / d).max(d / p);
        for (k, &t) in thresholds.iter().enumerate() {
            if ratio < t {
                acc[5 + k] += 1.0;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid(format!(
            "no valid pixel inside depth cap ({}, {}]",
            cap.min, cap.max
        )));
    }
    let m = n as f64;
    Ok(MetricsReport {
        abs_rel: acc[0] / m,
        sq_rel: acc[1] / m,
        rmse: (acc[2] / m).sqrt(),
        rmse_log: (acc[3] / m).sqrt(),
        log10: acc[4] / m,
        delta1: acc[5] / m,
        delta2: acc[6] / m,
        delta3: acc[7] / m,
        cap,
        valid_count: n,
    })
}

/// Restricts an evaluation to ground truth in `(lo, hi]`: pixels outside
/// the range leave the mask and predictions are clamped to
/// `[lo + MIN_EVAL_DEPTH, hi]`.
pub fn clip_to_cap<T: Real>(
    pred: &[T],
    gt: &[T],
    mask: &[bool],
    range: DepthCap,
) -> Result<(Vec<T>, Vec<T>, Vec<bool>)> {
    check_lengths(pred.len(), gt.len(), mask.len())?;
    let lo = T::of(range.min + MIN_EVAL_DEPTH);
    let hi = T::of(range.max);
    let mut p = pred.to_vec();
    let mut m = mask.to_vec();
    for i in 0..p.len() {
        m[i] = m[i] && range.contains(gt[i].f64());
        if m[i] {
            p[i] = p[i].max(lo).min(hi);
        }
    }
    Ok((p, gt.to_vec(), m))
}

/// RMSE over consecutive depth bins `(0, b0], (b0, b1], ...`; `None` for
/// bins without valid pixels.
pub fn range_rmse<T: Real>(
    pred: &[T],
    gt: &[T],
    mask: &[bool],
    bounds: &[f64],
) -> Result<Vec<(DepthCap, Option<MetricsReport>)>> {
    let mut lo = 0.0;
    let mut rows = Vec::with_capacity(bounds.len());
    for &hi in bounds {
        let cap = DepthCap::new(lo, hi)?;
        let (p, g, m) = clip_to_cap(pred, gt, mask, cap)?;
        let report = if m.iter().any(|&v| v) {
            Some(compute_metrics(&p, &g, &m, cap)?)
        } else {
            None
        };
        rows.push((cap, report));
        lo = hi;
    }
    Ok(rows)
}
