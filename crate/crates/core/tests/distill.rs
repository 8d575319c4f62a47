mod common;

use common::*;
use sftn_core::blocknet::{BlockNet, Mode};
use sftn_core::distill::{
    distill_train, fitnets_hint_loss, kd_loss, sp_loss, DistillConfig, Method, Regressor,
};
use sftn_core::losses::softmax_tempered;
use sftn_core::sftn::train_standard;
use sftn_tensor::{grad_check_params, Graph, Tensor, Var};

fn constant(g: &mut Graph<f64>, shape: &[usize], data: Vec<f64>) -> Var {
    g.constant(Tensor::new(shape.to_vec(), data).unwrap())
}

fn value(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).item().unwrap()
}

/// `CE + λ·τ²·KL(p_t ‖ p_s)` per sample from the softmax definition.
fn kd_oracle(s: &[f64], t: &[f64], labels: &[usize], k: usize, tau: f64, lambda: f64) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for i in 0..b {
        let (sr, tr) = (&s[i * k..(i + 1) * k], &t[i * k..(i + 1) * k]);
        let ce = -softmax_tempered(sr, 1.0).unwrap()[labels[i]].ln();
        let ps = softmax_tempered(sr, tau).unwrap();
        let pt = softmax_tempered(tr, tau).unwrap();
        let kl: f64 = pt.iter().zip(&ps).map(|(a, c)| a * (a / c).ln()).sum();
        total += ce + lambda * tau * tau * kl;
    }
    total / b as f64
}

/// `‖G_S − G_T‖² / b²` with explicit loops over the Gram entries.
fn sp_oracle(s: &[f64], t: &[f64], b: usize) -> f64 {
    let gram = |a: &[f64]| {
        let d = a.len() / b;
        let mut m = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                m[i * b + j] = (0..d).map(|c| a[i * d + c] * a[j * d + c]).sum();
            }
            let norm = (0..b)
                .map(|j| m[i * b + j] * m[i * b + j])
                .sum::<f64>()
                .sqrt();
            for j in 0..b {
                m[i * b + j] /= norm;
            }
        }
        m
    };
    let (gs, gt) = (gram(s), gram(t));
    gs.iter()
        .zip(&gt)
        .map(|(a, c)| (a - c) * (a - c))
        .sum::<f64>()
        / (b * b) as f64
}

#[test]
fn kd_hand_computed_example() {
    let mut g = Graph::<f64>::new();
    let s = constant(&mut g, &[1, 2], vec![0.0, 0.0]);
    let t = constant(&mut g, &[1, 2], vec![0.0, 3f64.ln()]);
    let l = kd_loss(&mut g, s, t, &[0], 1.0, 1.0).unwrap();
    let kl = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
    assert!((kl - 0.13081).abs() < 1e-5);
    assert!((value(&g, l) - (2f64.ln() + kl)).abs() < 1e-12);
    assert!((value(&g, l) - 0.82396).abs() < 1e-5);

    let plain = kd_loss(&mut g, s, t, &[0], 1.0, 0.0).unwrap();
    assert!((value(&g, plain) - 2f64.ln()).abs() < 1e-12);
    let same = kd_loss(&mut g, t, t, &[1], 4.0, 1.0).unwrap();
    assert!((value(&g, same) - (4f64 / 3.0).ln()).abs() < 1e-12);
    assert!(kd_loss(&mut g, s, t, &[0], 0.0, 1.0).is_err());
}

#[test]
fn kd_matches_oracle_on_random_instances() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let (b, k) = (3, 4);
        let s = uniform(&mut r, b * k, -3.0, 3.0);
        let t = uniform(&mut r, b * k, -3.0, 3.0);
        let labels = [0, 1, (seed % 4) as usize];
        let tau = 0.5 + seed as f64 / 3.0;
        let mut g = Graph::<f64>::new();
        let (sv, tv) = (
            constant(&mut g, &[b, k], s.clone()),
            constant(&mut g, &[b, k], t.clone()),
        );
        let l = kd_loss(&mut g, sv, tv, &labels, tau, 0.8).unwrap();
        let want = kd_oracle(&s, &t, &labels, k, tau, 0.8);
        assert!((value(&g, l) - want).abs() < 1e-6, "seed {seed}");
    }
}

#[test]
fn fitnets_examples() {
    let mut r = rng(11);
    let mut g = Graph::<f64>::new();
    let reg = Regressor::allocate(&mut g, 4, 4).unwrap();
    let w = g.value_mut(reg.weight).unwrap().data_mut();
    for i in 0..4 {
        w[i * 4 + i] = 1.0;
    }
    let shape = [2, 4, 4, 4];
    let f = uniform(&mut r, 128, -1.0, 1.0);
    let s = uniform(&mut r, 128, -1.0, 1.0);
    let fv = constant(&mut g, &shape, f.clone());
    let sv = constant(&mut g, &shape, s.clone());
    // Identity regressor: equal features give zero, otherwise the plain MSE.
    let zero = fitnets_hint_loss(&mut g, &[fv], &[fv], &[reg], &[0]).unwrap();
    assert_eq!(value(&g, zero), 0.0);
    let l = fitnets_hint_loss(&mut g, &[sv], &[fv], &[reg], &[0]).unwrap();
    let oracle = s
        .iter()
        .zip(&f)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / 128.0;
    assert!((value(&g, l) - oracle).abs() < 1e-6);
    // A zero student leaves mean(f²).
    let zs = constant(&mut g, &shape, vec![0.0; 128]);
    let l = fitnets_hint_loss(&mut g, &[zs], &[fv], &[reg], &[0]).unwrap();
    let oracle = f.iter().map(|a| a * a).sum::<f64>() / 128.0;
    assert!((value(&g, l) - oracle).abs() < 1e-12);

    let small = constant(&mut g, &[2, 4, 2, 2], vec![0.0; 32]);
    assert!(fitnets_hint_loss(&mut g, &[small], &[fv], &[reg], &[0]).is_err());
}

#[test]
fn sp_examples_and_oracle() {
    for seed in 0..20 {
        let mut r = rng(50 + seed);
        let shape = [3, 2, 2, 2];
        let t = uniform(&mut r, 24, -1.0, 1.0);
        let s = uniform(&mut r, 24, -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let tv = constant(&mut g, &shape, t.clone());
        let sv = constant(&mut g, &[3, 4, 2, 1], s.clone());
        let l = sp_loss(&mut g, &[sv], &[tv], &[0]).unwrap();
        assert!(
            (value(&g, l) - sp_oracle(&s, &t, 3)).abs() < 1e-6,
            "seed {seed}"
        );
        let same = sp_loss(&mut g, &[tv], &[tv], &[0]).unwrap();
        assert_eq!(value(&g, same), 0.0);
        let doubled = constant(&mut g, &shape, t.iter().map(|v| 2.0 * v).collect());
        let scaled = sp_loss(&mut g, &[doubled], &[tv], &[0]).unwrap();
        assert!(value(&g, scaled).abs() < 1e-12);
    }
    let mut g = Graph::<f64>::new();
    let one = constant(&mut g, &[1, 2, 1, 1], vec![1.0, 2.0]);
    assert!(sp_loss(&mut g, &[one], &[one], &[0]).is_err());
    let two = constant(&mut g, &[2, 1, 1, 1], vec![1.0, 2.0]);
    assert!(sp_loss(&mut g, &[two], &[two], &[1]).is_err());
}

#[test]
fn hint_blocks_resolution() {
    let fit = DistillConfig {
        method: Method::FitNets,
        ..DistillConfig::default()
    };
    assert_eq!(fit.blocks(3).unwrap(), vec![0, 1]);
    assert_eq!(fit.hint_weight(), 1.0);
    let sp = DistillConfig {
        method: Method::Sp,
        ..DistillConfig::default()
    };
    assert_eq!(sp.blocks(3).unwrap(), vec![2]);
    assert_eq!(sp.hint_weight(), 100.0);
    assert!(DistillConfig::default().blocks(3).unwrap().is_empty());
    let bad = DistillConfig {
        method: Method::Sp,
        hint_blocks: Some(vec![4]),
        ..DistillConfig::default()
    };
    assert!(bad.blocks(3).is_err());
}

#[test]
fn total_loss_gradients_for_every_method() {
    for seed in 0..20u64 {
        let mut r = rng(300 + seed);
        let x = Tensor::new(vec![3, 2, 8, 8], uniform(&mut r, 384, -1.0, 1.0)).unwrap();
        // Teacher targets come from a separately built eval-mode teacher.
        let mut tg = Graph::<f64>::new();
        let teacher = BlockNet::build(&micro_teacher(), &mut tg, 500 + seed).unwrap();
        let xt = tg.constant(x.clone());
        let taps = teacher.forward_with_taps(&mut tg, xt, Mode::Eval).unwrap();
        let t_logits = tg.value(taps.logits).clone();
        let t_feats: Vec<Tensor<f64>> =
            taps.features.iter().map(|&f| tg.value(f).clone()).collect();
        let labels = [1, 3, (seed % 4) as usize];

        for method in [Method::Kd, Method::FitNets, Method::Sp] {
            let dcfg = DistillConfig {
                method,
                hint_blocks: if method == Method::Sp {
                    Some(vec![2, 3])
                } else {
                    None
                },
                ..DistillConfig::default()
            };
            let blocks = dcfg.blocks(3).unwrap();
            let mut g = Graph::<f64>::new();
            let student = BlockNet::build(&micro_student(), &mut g, seed).unwrap();
            let mut regs = Vec::new();
            if method == Method::FitNets {
                let mut rr = rng(seed);
                for _ in &blocks {
                    let reg = Regressor::allocate(&mut g, 2, 3).unwrap();
                    reg.init(&mut g, &mut rr).unwrap();
                    regs.push(reg);
                }
            }
            let params: Vec<Var> = g
                .persistent_vars()
                .filter(|&v| g.requires_grad(v))
                .collect();
            let err = grad_check_params(&mut g, &params, 1e-5, |g| {
                let xv = g.constant(x.clone());
                let out = student
                    .forward_with_taps(g, xv, Mode::Train)
                    .map_err(tensor_err)?;
                let tl = g.constant(t_logits.clone());
                let mut loss = kd_loss(g, out.logits, tl, &labels, dcfg.tau_kd, dcfg.lambda_kd)
                    .map_err(tensor_err)?;
                if method != Method::Kd {
                    let tf: Vec<Var> = t_feats.iter().map(|t| g.constant(t.clone())).collect();
                    let hint = match method {
                        Method::FitNets => fitnets_hint_loss(g, &out.features, &tf, &regs, &blocks),
                        _ => sp_loss(g, &out.features, &tf, &blocks),
                    }
                    .map_err(tensor_err)?;
                    let hint = g.scale(hint, dcfg.hint_weight())?;
                    loss = g.add(loss, hint)?;
                }
                Ok(loss)
            })
            .unwrap();
            assert!(err < 1e-4, "{method:?} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn distill_training_contracts() {
    let data = tiny_data(60, 4);
    let teacher = train_standard(&tiny_teacher(), &data, &short_sgd(1), 2, None)
        .unwrap()
        .checkpoint;
    let hash = teacher.hash();

    let init = distill_train(
        &tiny_student(),
        &teacher,
        &data,
        None,
        &DistillConfig::default(),
        &short_sgd(0),
        7,
    )
    .unwrap();
    let mut g = Graph::<f32>::new();
    let fresh = BlockNet::build(&tiny_student(), &mut g, 7).unwrap();
    assert_eq!(init.checkpoint.hash(), fresh.to_checkpoint(&g).hash());

    for method in [Method::Kd, Method::FitNets, Method::Sp] {
        let dcfg = DistillConfig {
            method,
            ..DistillConfig::default()
        };
        let a = distill_train(
            &tiny_student(),
            &teacher,
            &data,
            Some(&data),
            &dcfg,
            &short_sgd(2),
            7,
        )
        .unwrap();
        let b = distill_train(
            &tiny_student(),
            &teacher,
            &data,
            Some(&data),
            &dcfg,
            &short_sgd(2),
            7,
        )
        .unwrap();
        assert_eq!(a.checkpoint.hash(), b.checkpoint.hash(), "{method:?}");
        assert_eq!(a.teacher_hash_before, a.teacher_hash_after);
        assert_eq!(teacher.hash(), hash);
        assert_eq!(a.log.len(), 2);
        let has_hint = a
            .log
            .iter()
            .all(|e| e.components.iter().any(|c| c.0 == "hint"));
        assert_eq!(has_hint, method != Method::Kd, "{method:?}");
        assert!(a.test_accuracy.is_some());
    }

    let other = sftn_core::arch::NetArch::plain_cnn("wrong-k", [3, 16, 16], 5, &[3, 4, 6]).unwrap();
    assert!(distill_train(
        &other,
        &teacher,
        &data,
        None,
        &DistillConfig::default(),
        &short_sgd(1),
        1
    )
    .is_err());
}
