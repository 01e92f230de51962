use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tedepth::data::{
    augment_sample, depth_to_pointcloud, generate_synthetic_dataset, pca_principal_channel, split_dataset,
    AugmentPolicy, CameraIntrinsics, DepthSample, SceneConfig,
};
use tedepth::Tensor;

fn tiny_samples(n: usize) -> Vec<DepthSample> {
    (0..n)
        .map(|i| {
            let rgb = Tensor::full([3, 2, 2], 0.5f32);
            let depth = Tensor::full([1, 2, 2], 1.0 + i as f32);
            DepthSample::new(format!("id{i:03}"), rgb, depth).unwrap()
        })
        .collect()
}

/// A grey image with one bright rgb pixel whose depth is also unique.
fn marked(h: usize, w: usize, y: usize, x: usize) -> DepthSample {
    let rgb = Tensor::from_fn([3, h, w], |i| if i % (h * w) == y * w + x { 1.0 } else { 0.25 });
    let depth = Tensor::from_fn([1, h, w], |i| if i == y * w + x { 7.0 } else { 2.0 });
    DepthSample::new("m", rgb, depth).unwrap()
}

fn marker_positions(s: &DepthSample) -> (Vec<usize>, Vec<usize>) {
    let hw = s.height() * s.width();
    let bright = (0..hw).filter(|&p| s.rgb().data()[p] > 0.9).collect();
    let deep = (0..hw).filter(|&p| s.depth().data()[p] == 7.0).collect();
    (bright, deep)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_ids(n in 8usize..120, seed in any::<u64>()) {
        let samples = tiny_samples(n);
        let s = split_dataset(&samples, seed).unwrap();
        prop_assert_eq!(s.train_mixer.len(), n / 8);
        prop_assert_eq!(s.train_base.len() + s.train_mixer.len(), n);
        let base: BTreeSet<_> = s.train_base.iter().collect();
        let mixer: BTreeSet<_> = s.train_mixer.iter().collect();
        prop_assert!(base.is_disjoint(&mixer));
        prop_assert_eq!(base.len() + mixer.len(), n);
        prop_assert_eq!(split_dataset(&samples, seed).unwrap(), s);
    }

    #[test]
    fn geometry_moves_rgb_and_depth_together(
        y in 0usize..6, x in 0usize..7, seed in any::<u64>(), crop_h in 3usize..=6, crop_w in 3usize..=7,
    ) {
        let s = marked(6, 7, y, x);
        let policy = AugmentPolicy {
            flip_prob: 0.5,
            max_rotation_deg: 0.0,
            crop: Some((crop_h, crop_w)),
            jitter_prob: 0.0,
            jitter_range: 0.0,
        };
        let out = augment_sample(&s, &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!((out.height(), out.width()), (crop_h, crop_w));
        let (bright, deep) = marker_positions(&out);
        prop_assert_eq!(bright, deep);
    }

    #[test]
    fn jitter_never_touches_depth(seed in any::<u64>()) {
        let s = marked(5, 5, 2, 3);
        let policy = AugmentPolicy { flip_prob: 0.0, max_rotation_deg: 0.0, crop: None, jitter_prob: 1.0, jitter_range: 0.3 };
        let out = augment_sample(&s, &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.depth(), s.depth());
        prop_assert!(out.rgb().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn augmented_masks_follow_depth() {
    let samples = generate_synthetic_dataset(&SceneConfig { count: 4, seed: 3, ..SceneConfig::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let policy = AugmentPolicy {
        max_rotation_deg: 20.0,
        ..AugmentPolicy::default()
    };
    for s in &samples {
        let out = augment_sample(s, &policy, &mut rng).unwrap();
        for (m, d) in out.mask().iter().zip(out.depth().data()) {
            assert_eq!(*m, *d > 0.0);
        }
    }
}

/// Brute-force oracle: full covariance eigendecomposition, then the same
/// sign and normalization conventions.
fn pca_oracle(x: &Tensor<f64>) -> Vec<f64> {
    let (c, hw) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
    let mut m = DMatrix::from_row_slice(c, hw, x.data());
    for mut row in m.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    let cov = &m * m.transpose() / hw as f64;
    let eig = SymmetricEigen::new(cov.clone());
    let top = eig.eigenvalues.imax();
    let mut v = eig.eigenvectors.column(top).into_owned();
    let lead = (0..c).max_by(|&a, &b| cov[(a, a)].total_cmp(&cov[(b, b)]).then(b.cmp(&a))).unwrap();
    if v[lead] < 0.0 {
        v = -v;
    }
    let proj: Vec<f64> = (m.transpose() * v).iter().copied().collect();
    let (lo, hi) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &p| (l.min(p), h.max(p)));
    proj.iter().map(|p| (p - lo) / (hi - lo)).collect()
}

#[test]
fn pca_matches_eigendecomposition_on_rank_one_input() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let loadings: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let offsets: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let signal: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_fn([4, 8, 8], |i| loadings[i / 64] * signal[i % 64] + offsets[i / 64]);
        let got = pca_principal_channel(&x).unwrap();
        assert_eq!(got.shape(), &[1, 8, 8]);
        for (g, o) in got.data().iter().zip(pca_oracle(&x)) {
            assert!((g - o).abs() < 1e-6, "seed {seed}: {g} vs {o}");
        }
    }
}

#[test]
fn pointcloud_skips_invalid_pixels() {
    let s = generate_synthetic_dataset(&SceneConfig { count: 1, ..SceneConfig::default() }).unwrap().remove(0);
    let mut depth = s.depth().clone();
    depth.data_mut()[..10].iter_mut().for_each(|d| *d = 0.0);
    let k = CameraIntrinsics::for_image(s.height(), s.width());
    let cloud = depth_to_pointcloud(&depth, s.rgb(), &k).unwrap();
    assert_eq!(cloud.len(), 32 * 32 - 10);
    let ply = cloud.to_ply();
    assert!(ply.starts_with("ply\nformat ascii 1.0\n"));
    assert_eq!(ply.lines().filter(|l| !l.is_empty()).count(), cloud.len() + ply.lines().take_while(|l| *l != "end_header").count() + 1);
}
