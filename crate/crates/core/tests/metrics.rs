mod common;

use common::*;
use proptest::prelude::*;
use sftn_core::blocknet::BlockNet;
use sftn_core::data::Dataset;
use sftn_core::metrics::{
    accuracy, cka_linear, entropy_from_log_probs, kl_from_log_probs, linear_probe_transfer,
    mean_entropy_from_logits, mean_kl_from_logits, prediction_entropy, teacher_student_kl,
    top1_agreement_from_logits,
};
use sftn_core::sftn::train_standard;
use sftn_core::trainer::SgdConfig;
use sftn_tensor::Graph;

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn relabel(data: &Dataset, labels: Vec<usize>) -> Dataset {
    Dataset::new(
        "relabelled",
        data.images().to_vec(),
        labels,
        data.num_classes(),
        data.dims(),
    )
    .unwrap()
}

#[test]
fn constant_predictor_on_its_own_class() {
    let data = tiny_data(30, 1);
    let mut g = Graph::<f32>::new();
    let net = BlockNet::allocate(&tiny_student(), &mut g).unwrap();
    // Zero weights everywhere; the head bias alone picks class 7.
    g.value_mut(net.head().bias).unwrap().data_mut()[7] = 1.0;
    let sevens = relabel(&data, vec![7; 30]);
    assert_eq!(accuracy(&mut g, &net, &sevens).unwrap(), 1.0);
}

#[test]
fn untrained_net_is_near_chance_on_random_labels() {
    let data = tiny_data(1000, 2);
    let mut r = rng(3);
    let labels = (0..1000)
        .map(|_| rand::Rng::random_range(&mut r, 0..10))
        .collect();
    let random = relabel(&data, labels);
    let mut g = Graph::<f32>::new();
    let net = BlockNet::build(&tiny_student(), &mut g, 4).unwrap();
    let acc = accuracy(&mut g, &net, &random).unwrap();
    assert!((acc - 0.1).abs() <= 0.03, "accuracy {acc}");
}

#[test]
fn accuracy_is_additive_over_partitions() {
    let data = tiny_data(90, 5);
    let mut g = Graph::<f32>::new();
    let net = BlockNet::build(&tiny_student(), &mut g, 6).unwrap();
    let whole = accuracy(&mut g, &net, &data).unwrap();
    let parts = [
        (0..25).collect::<Vec<_>>(),
        (25..70).collect(),
        (70..90).collect(),
    ];
    let mut weighted = 0.0;
    for p in &parts {
        let sub = data.subset(p, "part").unwrap();
        weighted += accuracy(&mut g, &net, &sub).unwrap() * p.len() as f64;
    }
    assert!((weighted / 90.0 - whole).abs() < 1e-12);
}

#[test]
fn empty_dataset_is_an_error() {
    let data = tiny_data(20, 1).subset(&[], "empty").unwrap();
    let mut g = Graph::<f32>::new();
    let net = BlockNet::build(&tiny_student(), &mut g, 1).unwrap();
    assert!(accuracy(&mut g, &net, &data).is_err());
    assert!(prediction_entropy(&mut g, &net, &data).is_err());
}

#[test]
fn model_level_kl_and_entropy() {
    let data = tiny_data(40, 7);
    let mut g = Graph::<f32>::new();
    let net = BlockNet::build(&tiny_student(), &mut g, 8).unwrap();
    let mut g2 = Graph::<f32>::new();
    let same = BlockNet::build(&tiny_student(), &mut g2, 8).unwrap();
    assert_eq!(
        teacher_student_kl(&mut g, &net, &mut g2, &same, &data).unwrap(),
        0.0
    );
    let mut g3 = Graph::<f32>::new();
    let other = BlockNet::build(&tiny_student(), &mut g3, 9).unwrap();
    assert!(teacher_student_kl(&mut g, &net, &mut g3, &other, &data).unwrap() > 0.0);
    let h = prediction_entropy(&mut g, &net, &data).unwrap();
    assert!(h >= 0.0 && h <= 10f64.ln());
}

#[test]
fn kl_examples() {
    // One-hot teacher against a uniform student, and the batch mean.
    let big = 1e3;
    let t = [big, 0.0, 0.0, big];
    let s = [0.0, 0.0, 0.0, 0.0];
    let kl = mean_kl_from_logits(&t, &s, 2).unwrap();
    assert!((kl - 2f64.ln()).abs() < 1e-12);
    let t2 = [0.3, -1.2, 2.0, 0.0];
    let s2 = [1.0, 0.5, -0.5, 0.2];
    let per = |a: &[f64], b: &[f64]| {
        let (la, lb) = (log_softmax(a), log_softmax(b));
        la.iter()
            .zip(&lb)
            .map(|(x, y)| x.exp() * (x - y))
            .sum::<f64>()
    };
    let want = (per(&t2[..2], &s2[..2]) + per(&t2[2..], &s2[2..])) / 2.0;
    assert!((mean_kl_from_logits(&t2, &s2, 2).unwrap() - want).abs() < 1e-12);
    assert!(mean_kl_from_logits(&[], &[], 2).is_err());
}

#[test]
fn entropy_examples() {
    let k = 10;
    assert!((mean_entropy_from_logits(&vec![0.0; k], k).unwrap() - 10f64.ln()).abs() < 1e-12);
    let mut one_hot = vec![-1e4; k];
    one_hot[3] = 0.0;
    assert!(mean_entropy_from_logits(&one_hot, k).unwrap().abs() < 1e-12);
    let mut half = vec![-1e4; k];
    half[0] = 0.0;
    half[1] = 0.0;
    assert!((mean_entropy_from_logits(&half, k).unwrap() - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn agreement_with_itself_is_one() {
    let mut r = rng(12);
    let a = uniform(&mut r, 50, -1.0, 1.0);
    assert_eq!(top1_agreement_from_logits(&a, &a, 5).unwrap(), 1.0);
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_only_on_equal(a in prop::collection::vec(-20.0f64..20.0, 2..8), shift in -5.0f64..5.0, seed in 0u64..100) {
        let k = a.len();
        let mut r = rng(seed);
        let b = uniform(&mut r, k, -20.0, 20.0);
        let (la, lb) = (log_softmax(&a), log_softmax(&b));
        let kl = kl_from_log_probs(&la, &lb);
        prop_assert!(kl >= 0.0);
        let same = kl_from_log_probs(&la, &la);
        prop_assert!(same.abs() < 1e-10);
        // A uniform shift leaves the distribution unchanged.
        let shifted: Vec<f64> = a.iter().map(|v| v + shift).collect();
        prop_assert!(kl_from_log_probs(&la, &log_softmax(&shifted)).abs() < 1e-10);
        if la.iter().zip(&lb).any(|(x, y)| (x.exp() - y.exp()).abs() > 1e-3) {
            prop_assert!(kl > 1e-10);
        }
    }

    #[test]
    fn entropy_is_bounded(z in prop::collection::vec(-50.0f64..50.0, 2..12)) {
        let h = entropy_from_log_probs(&log_softmax(&z));
        prop_assert!(h >= -1e-12 && h <= (z.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn cka_is_symmetric_and_bounded(seed in 0u64..1000, n in 3usize..12, p in 1usize..5, q in 1usize..5) {
        let mut r = rng(seed);
        let x = uniform(&mut r, n * p, -1.0, 1.0);
        let y = uniform(&mut r, n * q, -1.0, 1.0);
        let a = cka_linear(&x, p, &y, q).unwrap();
        let b = cka_linear(&y, q, &x, p).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
        prop_assert!((0.0..=1.0 + 1e-9).contains(&a));
        prop_assert!((cka_linear(&x, p, &x, p).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cka_rejects_degenerate_inputs() {
    assert!(cka_linear(&[1.0, 2.0], 1, &[1.0, 2.0], 1).is_err());
    assert!(cka_linear(&[1.0; 4], 1, &[1.0, 2.0, 3.0, 4.0], 1).is_err());
}

#[test]
fn linear_probe_contracts() {
    let data = tiny_data(600, 10);
    let (train, test) = data.split_stratified(5, 1).unwrap();
    let teacher = train_standard(&tiny_teacher(), &train, &short_sgd(6), 1, None).unwrap();
    let mut g = Graph::<f32>::new();
    let net = BlockNet::from_checkpoint(&teacher.checkpoint, &mut g).unwrap();
    let own = accuracy(&mut g, &net, &test).unwrap();

    let probe_sgd = SgdConfig {
        epochs: 40,
        milestones: vec![30],
        weight_decay: 0.0,
        lr: 0.1,
        batch_size: 32,
        ..SgdConfig::default()
    };
    let probe = linear_probe_transfer(&mut g, &net, &train, &test, &probe_sgd, 3).unwrap();
    assert_eq!(probe.extractor_hash_before, probe.extractor_hash_after);
    assert_eq!(probe.extractor_hash_before, teacher.checkpoint.hash());
    assert!(
        (probe.accuracy - own).abs() <= 0.03,
        "probe {} vs model {own}",
        probe.accuracy
    );

    let untrained = SgdConfig {
        epochs: 0,
        milestones: vec![],
        ..probe_sgd
    };
    let chance = linear_probe_transfer(&mut g, &net, &train, &test, &untrained, 3).unwrap();
    assert!(
        (chance.accuracy - 0.1).abs() <= 0.03,
        "untrained probe {}",
        chance.accuracy
    );
}
