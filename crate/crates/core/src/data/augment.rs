//! Joint geometric and photometric augmentation.

use rand::Rng;

use super::DepthSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    /// Rotation angle drawn uniformly from `[-max_rotation_deg, max_rotation_deg]`.
    pub max_rotation_deg: f64,
    /// Output `(height, width)`; `None` keeps the full image.
    pub crop: Option<(usize, usize)>,
    /// Chance of each of contrast, brightness and color jitter.
    pub jitter_prob: f64,
    /// Jitter factors lie in `[1 - jitter_range, 1 + jitter_range]`.
    pub jitter_range: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip_prob: 0.5,
            max_rotation_deg: 2.5,
            crop: None,
            jitter_prob: 0.5,
            jitter_range: 0.1,
        }
    }
}

impl AugmentPolicy {
    /// A policy that returns every sample unchanged.
    pub fn identity() -> Self {
        AugmentPolicy {
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            crop: None,
            jitter_prob: 0.0,
            jitter_range: 0.0,
        }
    }
}

pub(crate) fn hflip(s: &DepthSample) -> Result<DepthSample> {
    let flip = |t: &Tensor<f32>| {
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let d = t.data();
        Tensor::from_fn([c, h, w], |i| {
            let x = i % w;
            d[i - x + (w - 1 - x)]
        })
    };
    DepthSample::new(s.id.clone(), flip(&s.rgb), flip(&s.depth))
}

/// Rotates about the image center. Depth uses nearest-neighbor sampling,
/// rgb bilinear; pixels whose source falls outside the image become invalid.
pub(crate) fn rotate(s: &DepthSample, degrees: f64) -> Result<DepthSample> {
    if degrees == 0.0 {
        return Ok(s.clone());
    }
    let (h, w) = (s.height(), s.width());
    let hw = h * w;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let src_rgb = s.rgb.data();
    let src_depth = s.depth.data();
    let mut rgb = vec![0f32; 3 * hw];
    let mut depth = vec![0f32; hw];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            let nx = sx.round();
            let ny = sy.round();
            if nx < 0.0 || ny < 0.0 || nx >= w as f64 || ny >= h as f64 {
                continue;
            }
            let p = y * w + x;
            depth[p] = src_depth[ny as usize * w + nx as usize];
            let x0 = sx.floor().clamp(0.0, w as f64 - 1.0);
            let y0 = sy.floor().clamp(0.0, h as f64 - 1.0);
            let fx = (sx - x0).clamp(0.0, 1.0);
            let fy = (sy - y0).clamp(0.0, 1.0);
            let (x0, y0) = (x0 as usize, y0 as usize);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            for c in 0..3 {
                let at = |yy: usize, xx: usize| src_rgb[c * hw + yy * w + xx] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                rgb[c * hw + p] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0) as f32;
            }
        }
    }
    DepthSample::new(s.id.clone(), Tensor::new([3, h, w], rgb)?, Tensor::new([1, h, w], depth)?)
}

pub(crate) fn crop(s: &DepthSample, top: usize, left: usize, ch: usize, cw: usize) -> Result<DepthSample> {
    let (h, w) = (s.height(), s.width());
    if ch == 0 || cw == 0 || top + ch > h || left + cw > w {
        return Err(Error::invalid(format!(
            "crop {ch}x{cw} at ({top}, {left}) does not fit a {h}x{w} image"
        )));
    }
    let cut = |t: &Tensor<f32>| {
        let c = t.shape()[0];
        let d = t.data();
        Tensor::from_fn([c, ch, cw], |i| {
            let x = i % cw;
            let y = (i / cw) % ch;
            let k = i / (cw * ch);
            d[(k * h + top + y) * w + left + x]
        })
    };
    DepthSample::new(s.id.clone(), cut(&s.rgb), cut(&s.depth))
}

fn jitter(s: &DepthSample, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<DepthSample> {
    let r = policy.jitter_range;
    let factor = |rng: &mut dyn rand::RngCore| {
        if r > 0.0 {
            rng.gen_range(1.0 - r..=1.0 + r)
        } else {
            1.0
        }
    };
    let contrast = rng.gen_bool(policy.jitter_prob).then(|| factor(rng));
    let brightness = rng.gen_bool(policy.jitter_prob).then(|| factor(rng));
    let color = rng
        .gen_bool(policy.jitter_prob)
        .then(|| [factor(rng), factor(rng), factor(rng)]);
    if contrast.is_none() && brightness.is_none() && color.is_none() {
        return Ok(s.clone());
    }
    let hw = s.height() * s.width();
    let src = s.rgb.data();
    let mean = src.iter().map(|&v| v as f64).sum::<f64>() / src.len() as f64;
    let rgb = Tensor::from_fn(s.rgb.shape().to_vec(), |i| {
        let mut v = src[i] as f64;
        if let Some(c) = contrast {
            v = (v - mean) * c + mean;
        }
        if let Some(b) = brightness {
            v *= b;
        }
        if let Some(k) = color {
            v *= k[i / hw];
        }
        v.clamp(0.0, 1.0) as f32
    });
    DepthSample::new(s.id.clone(), rgb, s.depth.clone())
}

/// Flip, rotation, crop and photometric jitter, in that order. Geometry is
/// applied jointly to rgb, depth and mask; jitter touches rgb only.
pub fn augment_sample(s: &DepthSample, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<DepthSample> {
    let (h, w) = (s.height(), s.width());
    if let Some((ch, cw)) = policy.crop {
        if ch > h || cw > w || ch == 0 || cw == 0 {
            return Err(Error::invalid(format!("crop {ch}x{cw} larger than image {h}x{w}")));
        }
    }
    let mut out = if rng.gen_bool(policy.flip_prob) {
        hflip(s)?
    } else {
        s.clone()
    };
    if policy.max_rotation_deg > 0.0 {
        let a = policy.max_rotation_deg;
        out = rotate(&out, rng.gen_range(-a..=a))?;
    }
    if let Some((ch, cw)) = policy.crop {
        let top = rng.gen_range(0..=h - ch);
        let left = rng.gen_range(0..=w - cw);
        out = crop(&out, top, left, ch, cw)?;
    }
    jitter(&out, policy, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> DepthSample {
        let rgb = Tensor::from_fn([3, 4, 5], |i| (i % 7) as f32 / 7.0);
        let depth = Tensor::from_fn([1, 4, 5], |i| 1.0 + i as f32);
        DepthSample::new("x", rgb, depth).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let s = sample();
        assert_eq!(hflip(&hflip(&s).unwrap()).unwrap(), s);
        assert_eq!(hflip(&s).unwrap().depth().data()[0], 5.0);
    }

    #[test]
    fn identity_policy() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment_sample(&s, &AugmentPolicy::identity(), &mut rng).unwrap(), s);
        assert_eq!(rotate(&s, 0.0).unwrap(), s);
        assert_eq!(crop(&s, 0, 0, 4, 5).unwrap(), s);
    }

    #[test]
    fn jitter_leaves_depth_alone() {
        let s = sample();
        let policy = AugmentPolicy {
            jitter_prob: 1.0,
            ..AugmentPolicy::identity()
        };
        let policy = AugmentPolicy { jitter_range: 0.1, ..policy };
        let out = augment_sample(&s, &policy, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(out.depth(), s.depth());
        assert_ne!(out.rgb(), s.rgb());
        assert!(out.rgb().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn oversized_crop_rejected() {
        let policy = AugmentPolicy {
            crop: Some((5, 5)),
            ..AugmentPolicy::identity()
        };
        assert!(augment_sample(&sample(), &policy, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn quarter_turn_moves_corners() {
        let rgb = Tensor::zeros([3, 3, 3]);
        let depth = Tensor::from_fn([1, 3, 3], |i| 1.0 + i as f32);
        let s = DepthSample::new("r", rgb, depth).unwrap();
        let r = rotate(&s, 90.0).unwrap();
        // output (x, y) samples source (cx + dy, cy - dx)
        assert_eq!(r.depth().data()[0], s.depth().data()[6]);
        assert!(r.mask().iter().all(|&m| m));
    }

    #[test]
    fn rotation_masks_exposed_corners() {
        let s = DepthSample::new("r", Tensor::zeros([3, 8, 8]), Tensor::full([1, 8, 8], 2.0)).unwrap();
        let r = rotate(&s, 30.0).unwrap();
        assert!(!r.mask()[0]);
        assert!(r.mask()[3 * 8 + 3]);
        assert_eq!(r.depth().data()[0], 0.0);
    }
}
