use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tedepth::loss::{ssi_loss_value, SsiLossConfig};
use tedepth::metrics::{compute_metrics, DepthCap};
use tedepth::mixer::{confidence_maps, depth_head, fuse_uniform, gru_step, GruParams};
use tedepth::train::poly_lr;
use tedepth::{Tape, Tensor};

fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn positive_pairs(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(0.05f64..20.0, n),
        prop::collection::vec(0.05f64..20.0, n),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_in_input_and_weight(seed in any::<u64>(), a in -3.0f64..3.0) {
        let x = rand_tensor(&[1, 2, 5, 4], seed, 1.0);
        let w = rand_tensor(&[3, 2, 3, 3], seed ^ 1, 1.0);
        let t = Tape::new();
        let conv = |x: &Tensor<f64>, w: &Tensor<f64>| {
            let y = t.conv2d_3x3(t.constant(x.clone()), t.constant(w.clone()), None).unwrap();
            (*t.value(y).unwrap()).clone()
        };
        let base = conv(&x, &w);
        for y in [conv(&x.map(|v| a * v), &w), conv(&x, &w.map(|v| a * v))] {
            for (s, b) in y.data().iter().zip(base.data()) {
                prop_assert!((s - a * b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn concat_then_slice_recovers_inputs(seed in any::<u64>(), c1 in 1usize..4, c2 in 1usize..4) {
        let a = rand_tensor(&[2, c1, 3, 3], seed, 1.0);
        let b = rand_tensor(&[2, c2, 3, 3], seed ^ 7, 1.0);
        let t = Tape::new();
        let cat = t.concat_channels(&[t.constant(a.clone()), t.constant(b.clone())]).unwrap();
        let sa = t.slice_channels(cat, 0, c1).unwrap();
        let sb = t.slice_channels(cat, c1, c2).unwrap();
        prop_assert_eq!(&*t.value(sa).unwrap(), &a);
        prop_assert_eq!(&*t.value(sb).unwrap(), &b);
    }

    #[test]
    fn backward_is_additive_over_independent_graphs(seed in any::<u64>()) {
        let x0 = rand_tensor(&[6], seed, 1.5);
        let y0 = rand_tensor(&[6], seed ^ 3, 1.5);
        let grads = |both: bool, first: bool| {
            let t = Tape::new();
            let x = t.leaf(x0.clone());
            let y = t.leaf(y0.clone());
            let gx = { let v = t.tanh(x).unwrap(); let v = t.mul(v, x).unwrap(); t.sum(v).unwrap() };
            let gy = { let v = t.sigmoid(y).unwrap(); t.mean(v).unwrap() };
            let root = if both { t.add(gx, gy).unwrap() } else if first { gx } else { gy };
            let mut g = t.backward(root).unwrap();
            (g.take(x), g.take(y))
        };
        let (jx, jy) = grads(true, false);
        let (sx, _) = grads(false, true);
        let (_, sy) = grads(false, false);
        prop_assert_eq!(jx, sx);
        prop_assert_eq!(jy, sy);
    }

    #[test]
    fn loss_is_exactly_permutation_invariant(
        (p, g) in positive_pairs(24),
        perm in Just((0..24).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let mask: Vec<bool> = (0..24).map(|i| i % 5 != 0).collect();
        let cfg = SsiLossConfig::default();
        let base = ssi_loss_value(&p, &g, &mask, &cfg).unwrap().loss;
        let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        let gp: Vec<f64> = perm.iter().map(|&i| g[i]).collect();
        let mp: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
        prop_assert_eq!(ssi_loss_value(&pp, &gp, &mp, &cfg).unwrap().loss.to_bits(), base.to_bits());
    }

    #[test]
    fn loss_with_full_variance_focus_ignores_global_scale(g in prop::collection::vec(0.1f64..10.0, 16), s in 0.1f64..10.0) {
        let p: Vec<f64> = g.iter().map(|v| v * s).collect();
        let cfg = SsiLossConfig { alpha: 10.0, eta: 1.0 };
        prop_assert!(ssi_loss_value(&p, &g, &[true; 16], &cfg).unwrap().loss < 1e-7);
    }

    #[test]
    fn delta_accuracies_are_monotone((p, g) in positive_pairs(30)) {
        let m = compute_metrics(&p, &g, &[true; 30], DepthCap::new(0.0, 20.0).unwrap()).unwrap();
        prop_assert!(0.0 <= m.delta1 && m.delta1 <= m.delta2 && m.delta2 <= m.delta3 && m.delta3 <= 1.0);
        prop_assert!(m.abs_rel >= 0.0 && m.sq_rel >= 0.0 && m.rmse >= 0.0 && m.log10 >= 0.0);
    }

    #[test]
    fn symmetric_metrics_ignore_argument_order((p, g) in positive_pairs(30)) {
        let cap = DepthCap::new(0.0, 20.0).unwrap();
        let a = compute_metrics(&p, &g, &[true; 30], cap).unwrap();
        let b = compute_metrics(&g, &p, &[true; 30], cap).unwrap();
        prop_assert!((a.rmse_log - b.rmse_log).abs() < 1e-12);
        prop_assert!((a.rmse - b.rmse).abs() < 1e-12);
        prop_assert!((a.log10 - b.log10).abs() < 1e-12);
        prop_assert_eq!(a.delta1, b.delta1);
    }

    #[test]
    fn poly_lr_never_increases(total in 1u64..5000, power in 0.0f64..3.0) {
        let mut prev = f64::INFINITY;
        for t in 0..=total + 3 {
            let lr = poly_lr(1e-4, t, total, power);
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
        prop_assert_eq!(poly_lr(1e-4, total, total, power), 0.0);
    }

    #[test]
    fn uniform_fusion_is_bitwise_order_free(seed in any::<u64>(), perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let maps: Vec<Tensor<f64>> = (0..4).map(|i| rand_tensor(&[1, 3, 4, 4], seed ^ i, 5.0)).collect();
        let fuse = |order: &[usize]| {
            let t = Tape::new();
            let vars: Vec<_> = order.iter().map(|&i| t.constant(maps[i].clone())).collect();
            let f = fuse_uniform(&t, &vars, false).unwrap();
            (*t.value(f).unwrap()).clone()
        };
        let a = fuse(&[0, 1, 2, 3]);
        let b = fuse(&perm);
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

/// 100 random parameterizations. Magnitudes stay where a sigmoid is still
/// distinguishable from 0 and 1 in f64 (|logit| below ~36).
#[test]
fn gates_and_states_stay_in_their_open_ranges() {
    for seed in 0..100u64 {
        let t = Tape::<f64>::new();
        let c = 3;
        let f = |i: u64| t.constant(rand_tensor(&[1, c, 5, 5], seed * 31 + i, 2.0));
        let conv = |i: u64, cin: usize| {
            (
                t.constant(rand_tensor(&[c, cin, 3, 3], seed * 97 + i, 1.0)),
                t.constant(rand_tensor(&[c], seed * 89 + i, 1.0)),
            )
        };
        let features = [f(0), f(1), f(2)];
        let convs = [conv(0, c), conv(1, c), conv(2, c)];
        for m in confidence_maps(&t, &features, &convs).unwrap() {
            assert!(t.value(m).unwrap().data().iter().all(|&v| v > 0.0 && v < 1.0), "seed {seed}");
        }
        let gates = GruParams {
            update: conv(3, 2 * c),
            reset: conv(4, 2 * c),
            candidate: conv(5, 2 * c),
        };
        let mut h = t.constant(Tensor::zeros([1, c, 5, 5]));
        for &fi in &features {
            h = gru_step(&t, h, fi, &gates).unwrap();
            assert!(t.value(h).unwrap().data().iter().all(|&v| v > -1.0 && v < 1.0), "seed {seed}");
        }
        for kappa in [10.0, 80.0] {
            let w = t.constant(rand_tensor(&[1, c, 3, 3], seed * 7 + 6, 1.0));
            let b = t.constant(rand_tensor(&[1], seed * 5, 1.0));
            let d = depth_head(&t, h, w, b, kappa).unwrap();
            assert!(t.value(d).unwrap().data().iter().all(|&v| v > 0.0 && v < kappa), "seed {seed}");
        }
    }
}
