//! Shared test helpers: central finite differences and the case tables used by
//! both the gradient tests and the acceptance suite.

#![allow(dead_code)]

pub mod oracle;

use mdnet::losses::{
    dissimilarity_loss, joint_loss, peaky_loss, similarity_loss, triplet_loss, variance_weight, JointLossConfig,
    PeakyConfig, TripletConfig,
};
use mdnet::model::{forward, ModelConfig, ModelWeights, Squash};
use mdnet::synthwarp::Homography;
use mdnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps vanishing gradients from
/// turning round-off into a large ratio.
pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Step for whole-model checks. Instance norm couples every activation in the
/// image, so with thousands of relu and max-pool kinks in play a 1e-5 step
/// regularly straddles one; 1e-7 keeps clear of them and round-off is still
/// far below the tolerance.
pub const MODEL_FD_STEP: f64 = 1e-7;

/// Largest relative error between `analytic` and central differences of `f` at `x0`.
pub fn max_fd_error(x0: &[f64], analytic: &[f64], f: impl FnMut(&[f64]) -> f64, floor: f64) -> f64 {
    max_fd_error_with_step(x0, analytic, f, floor, FD_STEP)
}

pub fn max_fd_error_with_step(
    x0: &[f64],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
    floor: f64,
    step: f64,
) -> f64 {
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        x[i] = x0[i] + step;
        let fp = f(&x);
        x[i] = x0[i] - step;
        let fm = f(&x);
        x[i] = x0[i];
        let num = (fp - fm) / (2.0 * step);
        worst = worst.max(rel_error(analytic[i], num, floor));
    }
    worst
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, so relu kinks stay out of reach of the step.
pub fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Checks `sum(R * op(x))` for fixed random `R`, one input at a time.
/// `op` receives every input as a tensor (tracked or constant).
pub fn check_op(inputs: &[(Vec<usize>, Vec<f64>)], seed: u64, op: impl Fn(&[Tensor<f64>]) -> Tensor<f64>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = {
        let ts: Vec<_> = inputs.iter().map(|(s, d)| Tensor::new(s, d.clone())).collect();
        op(&ts).shape().to_vec()
    };
    let r = Tensor::new(&out_shape, uniform(&mut rng, out_shape.iter().product(), -1.0, 1.0));
    let scalar = |ts: &[Tensor<f64>]| op(ts).mul(&r).sum();
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let build = |vals: &[f64], tracked: bool| -> Vec<Tensor<f64>> {
            inputs
                .iter()
                .enumerate()
                .map(|(j, (s, d))| {
                    if j == k {
                        if tracked {
                            Tensor::param(s, vals.to_vec())
                        } else {
                            Tensor::new(s, vals.to_vec())
                        }
                    } else {
                        Tensor::new(s, d.clone())
                    }
                })
                .collect()
        };
        let ts = build(&inputs[k].1, true);
        scalar(&ts).backward();
        let g = ts[k].grad().unwrap_or_else(|| vec![0.0; inputs[k].1.len()]);
        let e = max_fd_error(&inputs[k].1, &g, |x| scalar(&build(x, false)).item(), 1e-4);
        worst = worst.max(e);
    }
    worst
}

pub type OpCase = (&'static str, fn(&mut ChaCha8Rng) -> f64);

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

/// One random trial per differentiable op; each returns the worst relative error.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("conv2d", |rng| {
            let (ci, co, k) = (dims(rng, 1, 3), dims(rng, 1, 3), [1, 3][rng.gen_range(0..2)]);
            let d = dims(rng, 1, 2);
            let (h, w) = (dims(rng, 4, 7), dims(rng, 4, 7));
            let pad = if rng.gen_bool(0.5) { d * (k - 1) / 2 } else { 0 };
            if h + 2 * pad < d * (k - 1) + 1 || w + 2 * pad < d * (k - 1) + 1 {
                return 0.0;
            }
            let seed = rng.gen();
            check_op(
                &[
                    (vec![ci, h, w], uniform(rng, ci * h * w, -1.0, 1.0)),
                    (vec![co, ci, k, k], uniform(rng, co * ci * k * k, -1.0, 1.0)),
                    (vec![co], uniform(rng, co, -1.0, 1.0)),
                ],
                seed,
                move |t| t[0].conv2d(&t[1], &t[2], d, pad),
            )
        }),
        ("add/sub/mul", |rng| {
            let n = dims(rng, 1, 12);
            let seed = rng.gen();
            check_op(
                &[(vec![n], uniform(rng, n, -2.0, 2.0)), (vec![n], uniform(rng, n, -2.0, 2.0))],
                seed,
                |t| t[0].add(&t[1]).mul(&t[0].sub(&t[1])).mul(&t[1]),
            )
        }),
        ("scalar broadcast", |rng| {
            let n = dims(rng, 2, 12);
            let seed = rng.gen();
            check_op(
                &[(vec![n], uniform(rng, n, -2.0, 2.0)), (vec![], uniform(rng, 1, -2.0, 2.0))],
                seed,
                |t| t[0].mul(&t[1]).add(&t[1]).mul_scalar(0.7).add_scalar(0.3).rsub_scalar(2.0),
            )
        }),
        ("square/relu", |rng| {
            let n = dims(rng, 1, 16);
            let seed = rng.gen();
            check_op(&[(vec![n], away_from_zero(rng, n))], seed, |t| t[0].relu().add(&t[0].square()))
        }),
        ("sigmoid/softsign", |rng| {
            let n = dims(rng, 1, 16);
            let seed = rng.gen();
            check_op(&[(vec![n], uniform(rng, n, -4.0, 4.0))], seed, |t| t[0].sigmoid().add(&t[0].softsign01()))
        }),
        ("reductions", |rng| {
            let (a, b) = (dims(rng, 1, 4), dims(rng, 1, 5));
            let seed = rng.gen();
            check_op(&[(vec![a, b], uniform(rng, a * b, -1.0, 1.0))], seed, |t| {
                t[0].mean_axis0().sum().add(&t[0].mean()).add(&t[0].reshape(&[b, a]).mean_axis0().mean())
            })
        }),
        ("channel/mul_plane", |rng| {
            let (c, h, w) = (dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 4));
            let seed = rng.gen();
            check_op(
                &[(vec![c, h, w], uniform(rng, c * h * w, -1.0, 1.0)), (vec![h, w], uniform(rng, h * w, -1.0, 1.0))],
                seed,
                move |t| t[0].mul_plane(&t[1]).channel(c - 1),
            )
        }),
        ("l2_normalize_channels", |rng| {
            let (c, h, w) = (dims(rng, 1, 8), dims(rng, 1, 4), dims(rng, 1, 4));
            let seed = rng.gen();
            check_op(&[(vec![c, h, w], uniform(rng, c * h * w, -1.0, 1.0))], seed, |t| {
                t[0].l2_normalize_channels(1e-10)
            })
        }),
        ("instance_norm", |rng| {
            let (c, h, w) = (dims(rng, 1, 3), dims(rng, 2, 4), dims(rng, 2, 4));
            let seed = rng.gen();
            check_op(&[(vec![c, h, w], uniform(rng, c * h * w, -1.0, 1.0))], seed, |t| t[0].instance_norm(1e-5))
        }),
        ("gather", |rng| {
            let (c, h, w) = (dims(rng, 1, 4), dims(rng, 2, 5), dims(rng, 2, 5));
            let px: Vec<(usize, usize)> = (0..4).map(|_| (rng.gen_range(0..w), rng.gen_range(0..h))).collect();
            let seed = rng.gen();
            check_op(
                &[(vec![c, h, w], uniform(rng, c * h * w, -1.0, 1.0)), (vec![c, h, w], uniform(rng, c * h * w, -1.0, 1.0))],
                seed,
                move |t| {
                    let a = t[0].gather_pixels(&px);
                    let b = t[1].gather_pixels(&px).gather_rows(&[3, 0, 0, 2]);
                    a.row_dot(&b)
                },
            )
        }),
        ("max_pool2d", |rng| {
            let (c, h, w) = (dims(rng, 1, 2), dims(rng, 2, 7), dims(rng, 2, 7));
            let size = [1, 3, 5][rng.gen_range(0..3)];
            let seed = rng.gen();
            check_op(&[(vec![c, h, w], uniform(rng, c * h * w, -1.0, 1.0))], seed, move |t| t[0].max_pool2d(size))
        }),
        ("mean_pool2d", |rng| {
            let (c, h, w) = (dims(rng, 1, 2), dims(rng, 2, 7), dims(rng, 2, 7));
            let size = [1, 3, 5][rng.gen_range(0..3)];
            let seed = rng.gen();
            check_op(&[(vec![c, h, w], uniform(rng, c * h * w, -1.0, 1.0))], seed, move |t| t[0].mean_pool2d(size))
        }),
        ("bilinear_sample", |rng| {
            let (c, h, w) = (dims(rng, 1, 2), dims(rng, 2, 5), dims(rng, 2, 5));
            let coords: Vec<Option<(f64, f64)>> = (0..6)
                .map(|_| rng.gen_bool(0.8).then(|| (rng.gen_range(0.0..(w - 1) as f64), rng.gen_range(0.0..(h - 1) as f64))))
                .collect();
            let seed = rng.gen();
            check_op(&[(vec![c, h, w], uniform(rng, c * h * w, -1.0, 1.0))], seed, move |t| {
                t[0].bilinear_sample(&coords, 2, 3)
            })
        }),
    ]
}

fn unit_volume(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Vec<f64> {
    Tensor::new(&[c, h, w], uniform(rng, c * h * w, -1.0, 1.0)).l2_normalize_channels(1e-10).data().to_vec()
}

/// Loss-level checks, each returning the worst relative error over all inputs.
pub fn loss_cases() -> Vec<OpCase> {
    vec![
        ("triplet", |rng| {
            let (c, h, w) = (4, 24, 24);
            let g = Homography::translation(rng.gen_range(0.6..1.4), rng.gen_range(-1.4..-0.6));
            let seed = rng.gen();
            let scalar_only = move |t: &[Tensor<f64>]| triplet_loss(&t[0], &t[1], &g, &TripletConfig::default()).unwrap();
            check_scalar(&[(vec![c, h, w], unit_volume(rng, c, h, w)), (vec![c, h, w], unit_volume(rng, c, h, w))], seed, scalar_only)
        }),
        ("peaky", |rng| {
            let (n, h, w) = (2, 12, 12);
            let wt = uniform(rng, h * w, 0.0, 1.0);
            let cfg = PeakyConfig {
                peak_patch: 5,
                variance_patch: 3,
            };
            let seed = rng.gen();
            check_scalar(&[(vec![n, h, w], uniform(rng, n * h * w, 0.05, 0.95))], seed, move |t| {
                peaky_loss(&t[0], &Tensor::new(&[h, w], wt.clone()), &cfg)
            })
        }),
        ("variance weight is detached", |rng| {
            // W is built from the tracked tensor itself; the gradient must equal
            // the one obtained with W supplied as a constant.
            let (h, w) = (10, 10);
            let cfg = PeakyConfig {
                peak_patch: 5,
                variance_patch: 3,
            };
            let vals = uniform(rng, 2 * h * w, 0.05, 0.95);
            let tracked = Tensor::param(&[2, h, w], vals.clone());
            peaky_loss(&tracked, &variance_weight(&tracked.add_scalar(0.0), &cfg), &cfg).backward();
            let constant = Tensor::param(&[2, h, w], vals.clone());
            let wt = variance_weight(&Tensor::new(&[2, h, w], vals), &cfg);
            peaky_loss(&constant, &wt, &cfg).backward();
            let (a, b) = (tracked.grad().unwrap(), constant.grad().unwrap());
            a.iter().zip(&b).map(|(x, y)| rel_error(*x, *y, 1e-4)).fold(0.0, f64::max)
        }),
        ("similarity", |rng| {
            let (n, h, w) = (2, 9, 11);
            let g = Homography::from_row_major([1.02, 0.05, 0.7, -0.03, 0.98, 0.4, 1e-3, -2e-3, 1.0]).unwrap();
            let seed = rng.gen();
            check_scalar(
                &[(vec![n, h, w], uniform(rng, n * h * w, 0.0, 1.0)), (vec![n, h, w], uniform(rng, n * h * w, 0.0, 1.0))],
                seed,
                move |t| similarity_loss(&t[0], &t[1], &g).unwrap(),
            )
        }),
        ("dissimilarity", |rng| {
            let (n, h, w) = (3, 5, 6);
            let seed = rng.gen();
            check_scalar(&[(vec![n, h, w], uniform(rng, n * h * w, 0.0, 1.0))], seed, |t| dissimilarity_loss(&t[0]))
        }),
    ]
}

/// As [`check_op`] for ops that already return a scalar.
pub fn check_scalar(inputs: &[(Vec<usize>, Vec<f64>)], _seed: u64, op: impl Fn(&[Tensor<f64>]) -> Tensor<f64>) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let build = |vals: &[f64], tracked: bool| -> Vec<Tensor<f64>> {
            inputs
                .iter()
                .enumerate()
                .map(|(j, (s, d))| match (j == k, tracked) {
                    (true, true) => Tensor::param(s, vals.to_vec()),
                    (true, false) => Tensor::new(s, vals.to_vec()),
                    _ => Tensor::new(s, d.clone()),
                })
                .collect()
        };
        let ts = build(&inputs[k].1, true);
        op(&ts).backward();
        let g = ts[k].grad().unwrap_or_else(|| vec![0.0; inputs[k].1.len()]);
        worst = worst.max(max_fd_error(&inputs[k].1, &g, |x| op(&build(x, false)).item(), 1e-4));
    }
    worst
}

/// All parameters of `w` flattened in declaration order.
pub fn flatten(w: &ModelWeights<f64>) -> Vec<f64> {
    w.params().iter().flat_map(|(_, p)| p.data().to_vec()).collect()
}

/// Copy of `template` whose parameters take the values in `flat`.
pub fn unflatten(template: &ModelWeights<f64>, flat: &[f64], tracked: bool) -> ModelWeights<f64> {
    let mut w = template.clone();
    let mut at = 0;
    for p in w.params_mut() {
        let n = p.numel();
        let vals = flat[at..at + n].to_vec();
        *p = if tracked {
            Tensor::param(p.shape(), vals)
        } else {
            Tensor::new(p.shape(), vals)
        };
        at += n;
    }
    w
}

/// Joint-loss gradient of every parameter of a reduced model (C = 8) on one
/// 24x24 pair, against central differences. Returns the worst relative error.
pub fn joint_model_check(seed: u64, normalize: bool, squash: Squash, use_variance_weight: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        normalize,
        squash,
        ..ModelConfig::tiny(8, 2)
    };
    let template = ModelWeights::<f64>::init(config, seed).unwrap();
    // Larger head weights than the default init so the detector terms carry
    // real gradient, and nonzero descriptor biases: with zero biases a pixel
    // whose inputs are all cut by relu has an exactly zero descriptor, where
    // the normalization is too steep for a finite-difference step.
    let mut x0 = flatten(&template);
    let head_at = x0.len() - 18;
    for v in &mut x0[head_at..head_at + 16] {
        *v = rng.gen_range(-0.5..0.5);
    }
    for v in &mut x0[head_at - 8..head_at] {
        *v = rng.gen_range(-0.2..0.2);
    }
    let img1 = Tensor::new(&[3, 24, 24], uniform(&mut rng, 3 * 24 * 24, 0.0, 1.0));
    let img2 = Tensor::new(&[3, 24, 24], uniform(&mut rng, 3 * 24 * 24, 0.0, 1.0));
    let g = Homography::from_row_major([1.01, 0.02, 0.8, -0.02, 0.99, -0.6, 2e-4, 1e-4, 1.0]).unwrap();
    let cfg = JointLossConfig {
        peaky: PeakyConfig {
            peak_patch: 7,
            variance_patch: 5,
        },
        use_variance_weight,
        ..JointLossConfig::default()
    };
    let loss = |w: &ModelWeights<f64>| {
        let a = forward(&img1, w);
        let b = forward(&img2, w);
        joint_loss(&a, &b, &g, &cfg).unwrap().total
    };
    let tracked = unflatten(&template, &x0, true);
    loss(&tracked).backward();
    let analytic: Vec<f64> = tracked
        .params()
        .iter()
        .flat_map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    max_fd_error_with_step(&x0, &analytic, |x| loss(&unflatten(&template, x, false)).item(), 1e-4, MODEL_FD_STEP)
}
