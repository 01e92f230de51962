use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const MAX_ITERS: usize = 100;
const TOL: f64 = 1e-9;

/// Projects `[C, H, W]` features onto their first principal direction and
/// min-max normalizes the result to `[0, 1]`. The sign is fixed so that the
/// largest-variance channel has a non-negative loading. Constant features
/// map to zeros.
pub fn pca_principal_channel<T: Real>(features: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = match *features.shape() {
        [c, h, w] if c >= 1 => (c, h, w),
        _ => {
            return Err(Error::shape(
                "pca_principal_channel",
                format!("expected [C, H, W], got {:?}", features.shape()),
            ))
        }
    };
    let hw = h * w;
    let x = features.data();
    let mut centered = vec![0f64; c * hw];
    for k in 0..c {
        let row = &x[k * hw..(k + 1) * hw];
        let mean = row.iter().map(|v| v.f64()).sum::<f64>() / hw as f64;
        for p in 0..hw {
            centered[k * hw + p] = row[p].f64() - mean;
        }
    }
    let mut cov = vec![0f64; c * c];
    for a in 0..c {
        for b in a..c {
            let s: f64 = (0..hw).map(|p| centered[a * hw + p] * centered[b * hw + p]).sum();
            cov[a * c + b] = s / hw as f64;
            cov[b * c + a] = s / hw as f64;
        }
    }
    let lead = (0..c)
        .max_by(|&a, &b| cov[a * c + a].total_cmp(&cov[b * c + b]).then(b.cmp(&a)))
        .unwrap();
    if cov[lead * c + lead] <= 0.0 {
        return Ok(Tensor::zeros([1, h, w]));
    }

    // start from the per-channel standard deviations
    let mut v: Vec<f64> = (0..c).map(|k| cov[k * c + k].sqrt()).collect();
    normalize(&mut v);
    for _ in 0..MAX_ITERS {
        let mut next: Vec<f64> = (0..c)
            .map(|a| (0..c).map(|b| cov[a * c + b] * v[b]).sum())
            .collect();
        if normalize(&mut next) == 0.0 {
            break;
        }
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = next;
        if delta < TOL {
            break;
        }
    }
    if v[lead] < 0.0 {
        v.iter_mut().for_each(|e| *e = -*e);
    }

    let proj: Vec<f64> = (0..hw)
        .map(|p| (0..c).map(|k| centered[k * hw + p] * v[k]).sum())
        .collect();
    let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 1e-12 * (hi.abs() + lo.abs()).max(1e-300)) {
        return Ok(Tensor::zeros([1, h, w]));
    }
    Ok(Tensor::from_fn([1, h, w], |p| T::of((proj[p] - lo) / span)))
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|e| e * e).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|e| *e /= n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minmax(v: &[f64]) -> Vec<f64> {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    }

    #[test]
    fn single_channel_is_minmax() {
        let vals = vec![3.0, -1.0, 0.5, 2.0];
        let f = Tensor::new([1, 2, 2], vals.clone()).unwrap();
        let out = pca_principal_channel(&f).unwrap();
        assert_eq!(out.shape(), [1, 2, 2]);
        for (a, b) in out.data().iter().zip(minmax(&vals)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_recovers_base() {
        let base: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64 / 9.0).collect();
        let weights = [0.5, 2.0, -1.0, 1.5];
        let f = Tensor::from_fn([4, 8, 8], |i| weights[i / 64] * base[i % 64]);
        let out = pca_principal_channel(&f).unwrap();
        for (a, b) in out.data().iter().zip(minmax(&base)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_is_zero() {
        let f = Tensor::full([3, 4, 4], 7.0f64);
        assert!(pca_principal_channel(&f).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
