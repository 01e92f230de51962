//! Finite-difference checks of every differentiable operation, mixer and
//! loss, run in 64-bit.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{ssi_loss, SsiLossConfig};
use crate::mixer::{depth_head, rank_predictors, FusionLocation, MixerConfig, MixerKind, MixerModel};
use crate::predictor::PredictorOutput;
use crate::tensor::{grad_check, ActivationKind, GradCheckReport, Tape, Tensor, Var};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub op: String,
    /// Argument the gradient is taken with respect to.
    pub arg: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values in `±[0.2, 1.5]`, far from the kinks of elu and clamp.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(y ⊙ r)` for a fixed random `r`, so linear ops see a non-trivial
/// adjoint.
fn project(t: &Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = t.constant(uniform(&shape, &mut rng, -1.0, 1.0));
    let yr = t.mul(y, r)?;
    t.sum(yr)
}

struct Suite {
    seed: u64,
    cases: Vec<GradCase>,
}

impl Suite {
    fn check<F>(&mut self, op: &str, arg: &str, point: &Tensor<f64>, f: F) -> Result<()>
    where
        F: Fn(&Tape<f64>, Var) -> Result<Var>,
    {
        let seed = self.seed;
        let report = grad_check(|t, x| project(t, f(t, x)?, seed), point, EPS, TOL)?;
        self.cases.push(GradCase {
            op: op.to_string(),
            arg: arg.to_string(),
            seed,
            report,
        });
        Ok(())
    }
}

fn conv_cases(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let x = uniform(&[2, 2, 5, 5], rng, -1.0, 1.0);
    let w = uniform(&[3, 2, 3, 3], rng, -0.5, 0.5);
    let b = uniform(&[3], rng, -0.5, 0.5);
    for dilation in [1, 2] {
        let op = format!("conv2d_3x3 d{dilation}");
        let (wc, bc) = (w.clone(), b.clone());
        s.check(&op, "input", &x, |t, v| {
            t.conv2d_3x3_dilated(v, t.constant(wc.clone()), Some(t.constant(bc.clone())), dilation)
        })?;
        let (xc, bc) = (x.clone(), b.clone());
        s.check(&op, "weight", &w, |t, v| {
            t.conv2d_3x3_dilated(t.constant(xc.clone()), v, Some(t.constant(bc.clone())), dilation)
        })?;
        let (xc, wc) = (x.clone(), w.clone());
        s.check(&op, "bias", &b, |t, v| {
            t.conv2d_3x3_dilated(t.constant(xc.clone()), t.constant(wc.clone()), Some(v), dilation)
        })?;
    }
    Ok(())
}

fn elementwise_cases(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let a = uniform(&[3, 4], rng, -1.5, 1.5);
    let b = uniform(&[3, 4], rng, -1.5, 1.5);
    let c = uniform(&[3, 4], rng, -1.5, 1.5);
    type Binary = fn(&Tape<f64>, Var, Var) -> Result<Var>;
    let binaries: [(&str, Binary); 3] = [
        ("add", |t, x, y| t.add(x, y)),
        ("sub", |t, x, y| t.sub(x, y)),
        ("mul", |t, x, y| t.mul(x, y)),
    ];
    for (op, f) in binaries {
        let bc = b.clone();
        s.check(op, "lhs", &a, move |t, v| f(t, v, t.constant(bc.clone())))?;
        let ac = a.clone();
        s.check(op, "rhs", &b, move |t, v| f(t, t.constant(ac.clone()), v))?;
    }
    let (ac, cc) = (a.clone(), c.clone());
    s.check("add_n", "middle", &b, |t, v| {
        t.add_n(&[t.constant(ac.clone()), v, t.constant(cc.clone())])
    })?;
    s.check("scale", "input", &a, |t, v| t.scale(v, -1.7))?;
    s.check("affine", "input", &a, |t, v| t.affine(v, 0.6, 2.0))?;
    s.check("one_minus", "input", &a, |t, v| t.one_minus(v))?;

    let positive = uniform(&[3, 4], rng, 0.5, 2.0);
    s.check("log", "input", &positive, |t, v| t.log(v))?;
    s.check("sqrt", "input", &positive, |t, v| t.sqrt(v))?;
    let away = off_zero(&[3, 4], rng);
    s.check("clamp_min", "input", &away, |t, v| t.clamp_min(v, 0.0))?;
    for kind in [
        ActivationKind::Sigmoid,
        ActivationKind::Tanh,
        ActivationKind::Elu,
        ActivationKind::Identity,
    ] {
        s.check(kind.name(), "input", &away, move |t, v| t.activation(v, kind))?;
    }
    Ok(())
}

fn structural_cases(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let x = uniform(&[2, 3, 3, 3], rng, -1.5, 1.5);
    let y = uniform(&[2, 2, 3, 3], rng, -1.5, 1.5);
    // Reductions are scalar already; square first so the adjoint varies.
    s.check("sum", "input", &x, |t, v| {
        let sq = t.mul(v, v)?;
        t.sum(sq)
    })?;
    s.check("mean", "input", &x, |t, v| {
        let sq = t.mul(v, v)?;
        t.mean(sq)
    })?;
    let yc = y.clone();
    s.check("concat_channels", "first", &x, |t, v| t.concat_channels(&[v, t.constant(yc.clone())]))?;
    let xc = x.clone();
    s.check("concat_channels", "second", &y, |t, v| t.concat_channels(&[t.constant(xc.clone()), v]))?;
    s.check("slice_channels", "input", &x, |t, v| t.slice_channels(v, 1, 2))?;
    let n = x.numel();
    let idx: Rc<[usize]> = (0..12).map(|_| rng.gen_range(0..n)).collect();
    s.check("gather", "input", &x, |t, v| t.gather(v, idx.clone()))?;
    let scalar = uniform(&[1], rng, -1.5, 1.5);
    s.check("expand", "input", &scalar, |t, v| t.expand(v, &[2, 3]))?;
    Ok(())
}

const K: usize = 3;
const C: usize = 2;
const SIDE: usize = 4;

fn mixer_cases(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let features: Vec<Tensor<f64>> = (0..K).map(|_| uniform(&[1, C, SIDE, SIDE], rng, -1.0, 1.0)).collect();
    let depths: Vec<Tensor<f64>> = (0..K).map(|_| uniform(&[1, 1, SIDE, SIDE], rng, 0.5, 9.0)).collect();
    let order = rank_predictors(&(0..K).map(|_| rng.gen_range(0.1..2.0)).collect::<Vec<_>>())?;
    let cases = [
        (MixerKind::Uniform, FusionLocation::Penultimate),
        (MixerKind::Confidence, FusionLocation::Penultimate),
        (MixerKind::Concat, FusionLocation::Penultimate),
        (MixerKind::Ranked, FusionLocation::Penultimate),
        (MixerKind::Ranked, FusionLocation::Final),
    ];
    for (kind, location) in cases {
        let mut cfg = MixerConfig::new(kind, location, 10.0);
        cfg.order = Some(order.clone());
        let model = MixerModel::<f64>::build(&cfg, K, C, rng.gen())?;
        let op = format!("mixer {} {}", kind.code(), location.code());
        let outputs = |t: &Tape<f64>, replace: Option<(usize, Var)>| -> Vec<PredictorOutput> {
            (0..K)
                .map(|i| {
                    let mut o = PredictorOutput {
                        features: t.constant(features[i].clone()),
                        depth: t.constant(depths[i].clone()),
                    };
                    if let Some((j, v)) = replace {
                        if i == j {
                            match location {
                                FusionLocation::Penultimate => o.features = v,
                                FusionLocation::Final => o.depth = v,
                            }
                        }
                    }
                    o
                })
                .collect()
        };
        for i in 0..K {
            let point = match location {
                FusionLocation::Penultimate => &features[i],
                FusionLocation::Final => &depths[i],
            };
            s.check(&op, &format!("map{i}"), point, |t, v| {
                let p = model.params.bind(t, false);
                model.forward(t, &p, &outputs(t, Some((i, v))))
            })?;
        }
        for (name, value) in model.params.iter() {
            s.check(&op, name, value, |t, v| {
                let mut p = model.params.bind(t, false);
                p.replace(name, v)?;
                model.forward(t, &p, &outputs(t, None))
            })?;
        }
    }

    let fused = uniform(&[1, 3, SIDE, SIDE], rng, -1.0, 1.0);
    let w = uniform(&[1, 3, 3, 3], rng, -0.4, 0.4);
    let b = uniform(&[1], rng, -0.4, 0.4);
    for kappa in [10.0, 80.0] {
        let op = format!("depth_head k{kappa}");
        let (wc, bc) = (w.clone(), b.clone());
        s.check(&op, "fused", &fused, |t, v| {
            depth_head(t, v, t.constant(wc.clone()), t.constant(bc.clone()), kappa)
        })?;
        let (fc, bc) = (fused.clone(), b.clone());
        s.check(&op, "weight", &w, |t, v| {
            depth_head(t, t.constant(fc.clone()), v, t.constant(bc.clone()), kappa)
        })?;
        let (fc, wc) = (fused.clone(), w.clone());
        s.check(&op, "bias", &b, |t, v| {
            depth_head(t, t.constant(fc.clone()), t.constant(wc.clone()), v, kappa)
        })?;
    }
    Ok(())
}

fn loss_cases(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let pred = uniform(&[2, 1, SIDE, SIDE], rng, 0.5, 9.0);
    let gt = uniform(&[2, 1, SIDE, SIDE], rng, 0.5, 9.0);
    let mask: Vec<bool> = (0..pred.numel()).map(|_| rng.gen_bool(0.85)).collect();
    for eta in [0.85, 1.0] {
        let cfg = SsiLossConfig { alpha: 10.0, eta };
        s.check(&format!("ssi_loss eta{eta}"), "pred", &pred, |t, v| {
            Ok(ssi_loss(t, v, &gt, &mask, &cfg)?.loss)
        })?;
    }
    Ok(())
}

/// Runs every check once per seed.
pub fn run_gradient_suite(seeds: impl IntoIterator<Item = u64>) -> Result<Vec<GradCase>> {
    let mut suite = Suite {
        seed: 0,
        cases: Vec::new(),
    };
    for seed in seeds {
        suite.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        conv_cases(&mut suite, &mut rng)?;
        elementwise_cases(&mut suite, &mut rng)?;
        structural_cases(&mut suite, &mut rng)?;
        mixer_cases(&mut suite, &mut rng)?;
        loss_cases(&mut suite, &mut rng)?;
    }
    Ok(suite.cases)
}
