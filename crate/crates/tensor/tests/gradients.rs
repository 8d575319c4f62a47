//! Finite-difference checks for every primitive, plus the accumulation and
//! error contracts of `backward`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sftn_tensor::{
    grad_check, grad_check_params, BatchNormOpts, Conv2dOpts, ConvTranspose2dOpts, Graph, Result,
    Tensor, TensorError, Var,
};

const SEEDS: u64 = 20;
const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero, so relu never sits on its kink.
fn nudged(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(r, shape, -1.0, 1.0);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = 0.05f64.copysign(*v) + *v;
        }
    }
    t
}

/// A shuffled grid with spacing 0.01, so pooling windows never hold near-ties.
fn distinct(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    v.shuffle(r);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// `sum(y ∘ R)` for a fixed random `R`, so every output coordinate matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = uniform(&mut rng(seed ^ 0x9e37_79b9), &shape, -1.0, 1.0);
    let r = g.constant(r);
    let prod = g.mul(y, r)?;
    g.sum(prod)
}

fn check(
    name: &str,
    seed: u64,
    point: &Tensor<f64>,
    f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
) {
    let err = grad_check(|g, x| f(g, x).and_then(|y| project(g, y, seed)), point, EPS).unwrap();
    assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
}

#[test]
fn matmul_transpose_and_elementwise() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
        let b = uniform(&mut r, &[4, 5], -1.0, 1.0);
        let c = uniform(&mut r, &[3, 4], -1.0, 1.0);
        let sq = uniform(&mut r, &[4, 4], -1.0, 1.0);
        let (bb, cc) = (b.clone(), c.clone());
        let bt = move |g: &mut Graph<f64>| g.constant(bb.clone());
        let ct = move |g: &mut Graph<f64>| g.constant(cc.clone());
        let a_const = a.clone();

        check("matmul lhs", seed, &a, |g, x| {
            let b = bt(g);
            g.matmul(x, b)
        });
        check("matmul rhs", seed, &b, |g, x| {
            let a = g.constant(a_const.clone());
            g.matmul(a, x)
        });
        check("matmul self", seed, &sq, |g, x| g.matmul(x, x));
        check("transpose", seed, &a, |g, x| g.transpose(x));
        check("add", seed, &a, |g, x| {
            let c = ct(g);
            g.add(x, c)
        });
        check("sub", seed, &a, |g, x| {
            let c = ct(g);
            g.sub(c, x)
        });
        check("mul", seed, &a, |g, x| {
            let c = ct(g);
            g.mul(x, c)
        });
        check("mul self", seed, &a, |g, x| g.mul(x, x));
        check("scale", seed, &a, |g, x| g.scale(x, -2.5));
        check("reshape", seed, &a, |g, x| g.reshape(x, &[2, 6]));
        check("exp", seed, &a, |g, x| g.exp(x));
        let positive = uniform(&mut r, &[3, 4], 0.2, 2.0);
        check("log", seed, &positive, |g, x| g.log(x));
        check("sum", seed, &a, |g, x| {
            let e = g.exp(x)?;
            g.sum(e)
        });
        check("mean", seed, &a, |g, x| {
            let e = g.mul(x, x)?;
            g.mean(e)
        });
    }
}

#[test]
fn bias_softmax_pick_and_normalize() {
    for seed in 0..SEEDS {
        let mut r = rng(100 + seed);
        let x2 = uniform(&mut r, &[4, 3], -2.0, 2.0);
        let x4 = uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0);
        let bias = uniform(&mut r, &[3], -1.0, 1.0);
        let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
        let (b4, x4c) = (x4.clone(), bias.clone());

        check("add_bias input", seed, &x4, |g, x| {
            let b = g.constant(x4c.clone());
            g.add_bias(x, b)
        });
        check("add_bias bias", seed, &bias, |g, b| {
            let x = g.constant(b4.clone());
            g.add_bias(x, b)
        });
        check("log_softmax", seed, &x2, |g, x| g.log_softmax(x));
        check("pick", seed, &x2, |g, x| g.pick(x, &labels));
        check("row_l2_normalize", seed, &x2, |g, x| g.row_l2_normalize(x));
    }
}

#[test]
fn convolutions() {
    let variants = [
        (
            Conv2dOpts {
                stride: 1,
                pad: 1,
                groups: 1,
            },
            3,
        ),
        (
            Conv2dOpts {
                stride: 2,
                pad: 1,
                groups: 1,
            },
            3,
        ),
        (
            Conv2dOpts {
                stride: 1,
                pad: 0,
                groups: 2,
            },
            3,
        ),
        (Conv2dOpts::default(), 1),
    ];
    for seed in 0..SEEDS {
        let mut r = rng(200 + seed);
        for (opts, k) in variants {
            let x = uniform(&mut r, &[2, 4, 5, 5], -1.0, 1.0);
            let w = uniform(&mut r, &[6, 4 / opts.groups, k, k], -0.5, 0.5);
            let (xc, wc) = (x.clone(), w.clone());
            check("conv2d input", seed, &x, |g, x| {
                let w = g.constant(wc.clone());
                g.conv2d(x, w, opts)
            });
            check("conv2d weight", seed, &w, |g, w| {
                let x = g.constant(xc.clone());
                g.conv2d(x, w, opts)
            });
        }
        for (opts, k) in [
            (ConvTranspose2dOpts { stride: 2, pad: 1 }, 4),
            (ConvTranspose2dOpts { stride: 1, pad: 1 }, 3),
        ] {
            let x = uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
            let w = uniform(&mut r, &[3, 2, k, k], -0.5, 0.5);
            let (xc, wc) = (x.clone(), w.clone());
            check("conv_transpose2d input", seed, &x, |g, x| {
                let w = g.constant(wc.clone());
                g.conv_transpose2d(x, w, opts)
            });
            check("conv_transpose2d weight", seed, &w, |g, w| {
                let x = g.constant(xc.clone());
                g.conv_transpose2d(x, w, opts)
            });
        }
    }
}

#[test]
fn relu_and_pooling() {
    for seed in 0..SEEDS {
        let mut r = rng(300 + seed);
        let x = nudged(&mut r, &[2, 3, 4, 4]);
        check("relu", seed, &x, |g, x| g.relu(x));
        let x = distinct(&mut r, &[2, 3, 4, 4]);
        check("maxpool2d 2/2", seed, &x, |g, x| g.maxpool2d(x, 2, 2));
        let x = distinct(&mut r, &[2, 2, 5, 5]);
        check("maxpool2d 3/2", seed, &x, |g, x| g.maxpool2d(x, 3, 2));
        let x = uniform(&mut r, &[2, 3, 3, 2], -1.0, 1.0);
        check("global_avgpool", seed, &x, |g, x| g.global_avgpool(x));
    }
}

#[test]
fn batch_norm_in_both_modes() {
    for seed in 0..SEEDS {
        let mut r = rng(400 + seed);
        for opts in [BatchNormOpts::train(), BatchNormOpts::eval()] {
            let mut g = Graph::<f64>::new();
            let x = g
                .add_param(uniform(&mut r, &[3, 2, 2, 2], -1.0, 1.0), false)
                .unwrap();
            let gamma = g.add_param(uniform(&mut r, &[2], 0.5, 1.5), false).unwrap();
            let beta = g
                .add_param(uniform(&mut r, &[2], -0.5, 0.5), false)
                .unwrap();
            let rm = g.add_buffer(uniform(&mut r, &[2], -0.2, 0.2)).unwrap();
            let rv = g.add_buffer(uniform(&mut r, &[2], 0.5, 1.5)).unwrap();
            let err = grad_check_params(&mut g, &[x, gamma, beta], EPS, |g| {
                let y = g.batch_norm2d(x, gamma, beta, rm, rv, opts)?;
                project(g, y, seed)
            })
            .unwrap();
            assert!(
                err < TOL,
                "batch_norm2d training={} seed {seed}: {err:e}",
                opts.training
            );
        }
    }
}

#[test]
fn composite_heads() {
    for seed in 0..SEEDS {
        let mut r = rng(500 + seed);
        // Linear layer, softmax and cross-entropy on a 4×3 input.
        let x = uniform(&mut r, &[4, 3], -1.0, 1.0);
        let w = uniform(&mut r, &[3, 5], -1.0, 1.0);
        let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
        let err = grad_check(
            |g, x| {
                let w = g.constant(w.clone());
                let z = g.matmul(x, w)?;
                let lp = g.log_softmax(z)?;
                let picked = g.pick(lp, &labels)?;
                let s = g.sum(picked)?;
                g.scale(s, -0.25)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "CE head seed {seed}: {err:e}");

        // conv → relu → maxpool → global average, checked against the kernel.
        let x = uniform(&mut r, &[2, 2, 4, 4], -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let wv = g
            .add_param(uniform(&mut r, &[3, 2, 3, 3], -0.5, 0.5), true)
            .unwrap();
        let xc = x.clone();
        let build = |g: &mut Graph<f64>| -> Result<Var> {
            let x = g.constant(xc.clone());
            let c = g.conv2d(
                x,
                wv,
                Conv2dOpts {
                    stride: 1,
                    pad: 1,
                    groups: 1,
                },
            )?;
            let a = g.relu(c)?;
            let p = g.maxpool2d(a, 2, 2)?;
            let h = g.global_avgpool(p)?;
            project(g, h, seed)
        };
        // Pre-activations within 1e-3 of zero or pooled near-ties would make
        // central differences straddle a kink; skip such draws.
        g.reset();
        let pre = {
            let xv = g.constant(x.clone());
            let c = g
                .conv2d(
                    xv,
                    wv,
                    Conv2dOpts {
                        stride: 1,
                        pad: 1,
                        groups: 1,
                    },
                )
                .unwrap();
            g.data(c).to_vec()
        };
        if pre.iter().any(|v| v.abs() < 1e-3) {
            continue;
        }
        let err = grad_check_params(&mut g, &[wv], EPS, build).unwrap();
        assert!(err < TOL, "conv head seed {seed}: {err:e}");
    }
}

#[test]
fn forward_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let i = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let p = g.matmul(a, i).unwrap();
    assert_eq!(g.data(p), &[1.0, 2.0, 3.0, 4.0]);

    let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x).unwrap();
    assert_eq!(g.data(y), &[0.0, 0.0, 2.0]);

    let ones = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let k = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let c = g
        .conv2d(
            ones,
            k,
            Conv2dOpts {
                stride: 1,
                pad: 1,
                groups: 1,
            },
        )
        .unwrap();
    // Direct sum over the zero-padded window at each output position.
    let mut brute = [0.0; 9];
    for (o, b) in brute.iter_mut().enumerate() {
        let (oi, oj) = ((o / 3) as isize, (o % 3) as isize);
        for di in -1..=1 {
            for dj in -1..=1 {
                let (i, j) = (oi + di, oj + dj);
                if (0..3).contains(&i) && (0..3).contains(&j) {
                    *b += 1.0;
                }
            }
        }
    }
    assert_eq!(g.data(c), &brute);
    assert_eq!(g.data(c)[4], 9.0);
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(
        Tensor::new(vec![1], vec![3.0])
            .unwrap()
            .with_requires_grad(true),
    );
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x), Some(&[6.0][..]));

    let mut g = Graph::<f64>::new();
    let x = g.leaf(
        Tensor::new(vec![3], vec![-1.0, 0.0, 2.0])
            .unwrap()
            .with_requires_grad(true),
    );
    let y = g.relu(x).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x), Some(&[0.0, 0.0, 1.0][..]));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    for seed in 0..SEEDS {
        let mut r = rng(600 + seed);
        let z = uniform(&mut r, &[1, 5], -3.0, 3.0);
        let y = r.random_range(0..5);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(z.clone().with_requires_grad(true));
        let lp = g.log_softmax(x).unwrap();
        let picked = g.pick(lp, &[y]).unwrap();
        let loss = g.scale(picked, -1.0).unwrap();
        let loss = g.sum(loss).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap().to_vec();

        let ce = |d: &[f64]| {
            let m = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + d.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - d[y]
        };
        let d = z.data();
        let m = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let zsum: f64 = d.iter().map(|v| (v - m).exp()).sum();
        for i in 0..5 {
            let (mut plus, mut minus) = (d.to_vec(), d.to_vec());
            plus[i] += EPS;
            minus[i] -= EPS;
            let numeric = (ce(&plus) - ce(&minus)) / (2.0 * EPS);
            let closed = (d[i] - m).exp() / zsum - if i == y { 1.0 } else { 0.0 };
            assert!((grad[i] - numeric).abs() < 1e-8, "seed {seed}");
            assert!((grad[i] - closed).abs() < 1e-12, "seed {seed}");
        }
    }
}

#[test]
fn sum_of_squares_is_exact() {
    for seed in 0..SEEDS {
        let point = uniform(&mut rng(700 + seed), &[7], -10.0, 10.0);
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &point,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-8, "{err:e}");
    }
}

#[test]
fn gradients_accumulate_over_uses() {
    for seed in 0..SEEDS {
        let mut r = rng(800 + seed);
        let point = uniform(&mut r, &[2, 3], -1.0, 1.0);
        let weights: Vec<Tensor<f64>> = (0..3)
            .map(|_| uniform(&mut r, &[2, 3], -1.0, 1.0))
            .collect();
        let single = |i: usize| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(point.clone().with_requires_grad(true));
            let w = g.constant(weights[i].clone());
            let y = g.mul(x, w).unwrap();
            let y = g.exp(y).unwrap();
            let l = g.sum(y).unwrap();
            g.backward(l).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let mut g = Graph::<f64>::new();
        let x = g.leaf(point.clone().with_requires_grad(true));
        let mut total = None;
        for w in &weights {
            let w = g.constant(w.clone());
            let y = g.mul(x, w).unwrap();
            let y = g.exp(y).unwrap();
            let l = g.sum(y).unwrap();
            total = Some(match total {
                Some(t) => g.add(t, l).unwrap(),
                None => l,
            });
        }
        g.backward(total.unwrap()).unwrap();
        let got = g.grad(x).unwrap();
        let parts: Vec<Vec<f64>> = (0..3).map(single).collect();
        for i in 0..6 {
            let want: f64 = parts.iter().map(|p| p[i]).sum();
            assert!((got[i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(
        Tensor::new(vec![2], vec![1.0, 2.0])
            .unwrap()
            .with_requires_grad(true),
    );
    let y = g.mul(x, x).unwrap();
    assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(s)) if s == vec![2]));
    let l = g.sum(y).unwrap();
    g.backward(l).unwrap();
    assert!(matches!(
        g.backward(l),
        Err(TensorError::BackwardAlreadyRun)
    ));

    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    match g.matmul(a, b) {
        Err(e @ TensorError::ShapeMismatch { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        }
        other => panic!("expected a shape mismatch, got {other:?}"),
    }
    let bad = g.constant(Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap());
    assert!(matches!(
        g.log(bad),
        Err(TensorError::NonFinite { op: "log" })
    ));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut r = rng(9);
        let mut g = Graph::<f32>::new();
        let w = g
            .add_param(uniform(&mut r, &[8, 3, 3, 3], -0.5, 0.5).cast(), true)
            .unwrap();
        let x = g.constant(uniform(&mut r, &[4, 3, 8, 8], -1.0, 1.0).cast());
        let c = g
            .conv2d(
                x,
                w,
                Conv2dOpts {
                    stride: 1,
                    pad: 1,
                    groups: 1,
                },
            )
            .unwrap();
        let a = g.relu(c).unwrap();
        let p = g.maxpool2d(a, 2, 2).unwrap();
        let h = g.global_avgpool(p).unwrap();
        let lp = g.log_softmax(h).unwrap();
        let l = g.mean(lp).unwrap();
        g.backward(l).unwrap();
        (g.data(h).to_vec(), g.grad(w).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert_eq!(
        a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
