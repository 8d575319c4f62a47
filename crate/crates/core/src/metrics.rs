//! Evaluation and teacher–student similarity measures.
//!
//! Model-level functions run the network in eval mode without recording a
//! tape and return `f64` statistics; the `*_from_logits` variants take
//! precomputed row-major `[n, k]` logits.

use serde::{Deserialize, Serialize};
use sftn_tensor::{Graph, Real, Tensor};

use crate::blocknet::{BlockNet, Head, Mode};
use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::losses::cross_entropy;
use crate::rng::{stream_rng, streams};
use crate::trainer::{argmax, count_correct, run_epochs, SgdConfig, StepOutput};

pub const EVAL_BATCH: usize = 256;

fn eval_rows<T: Real>(
    g: &mut Graph<T>,
    net: &BlockNet,
    data: &Dataset,
    mut f: impl FnMut(&mut Graph<T>, sftn_tensor::Var) -> Result<sftn_tensor::Var>,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    if data.dims() != net.arch().input_shape {
        return Err(CoreError::ArchMismatch(format!(
            "dataset `{}` has images {:?}, network `{}` expects {:?}",
            data.name(),
            data.dims(),
            net.arch().name,
            net.arch().input_shape
        )));
    }
    let mut out = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    let was_recording = g.set_recording(false);
    let result = (|| {
        for chunk in idx.chunks(EVAL_BATCH) {
            g.reset();
            let (x, _) = data.gather::<T>(chunk);
            let x = g.constant(x);
            let y = f(g, x)?;
            out.extend(g.data(y).iter().map(|v| v.as_f64()));
        }
        Ok(())
    })();
    g.reset();
    g.set_recording(was_recording);
    result.map(|()| out)
}

/// Eval-mode logits for every sample, row-major `[n, K]`.
pub fn predict_logits<T: Real>(
    g: &mut Graph<T>,
    net: &BlockNet,
    data: &Dataset,
) -> Result<Vec<f64>> {
    eval_rows(g, net, data, |g, x| net.forward(g, x, Mode::Eval))
}

/// Eval-mode globally pooled last-block features, row-major `[n, feature_dim]`.
pub fn pooled_features<T: Real>(
    g: &mut Graph<T>,
    net: &BlockNet,
    data: &Dataset,
) -> Result<Vec<f64>> {
    eval_rows(g, net, data, |g, x| net.pooled_features(g, x, Mode::Eval))
}

pub fn accuracy<T: Real>(g: &mut Graph<T>, net: &BlockNet, data: &Dataset) -> Result<f64> {
    let logits = predict_logits(g, net, data)?;
    accuracy_from_logits(&logits, net.arch().num_classes, data.labels())
}

fn check_rows(len: usize, k: usize, n: usize) -> Result<()> {
    if n == 0 {
        return Err(CoreError::EmptyDataset);
    }
    if k == 0 || len != n * k {
        return Err(CoreError::InvalidArgument(format!(
            "{len} logits do not form {n} rows of {k}"
        )));
    }
    Ok(())
}

pub fn accuracy_from_logits(logits: &[f64], k: usize, labels: &[usize]) -> Result<f64> {
    check_rows(logits.len(), k, labels.len())?;
    Ok(count_correct(logits, k, labels) as f64 / labels.len() as f64)
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

/// `KL(p ‖ q)` for one pair of log-probability rows. Terms with `p = 0` contribute nothing.
pub fn kl_from_log_probs(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .map(|(&a, &b)| {
            if a == f64::NEG_INFINITY {
                0.0
            } else {
                a.exp() * (a - b)
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// Mean over rows of `KL(softmax(teacher) ‖ softmax(student))`, in nats.
pub fn mean_kl_from_logits(teacher: &[f64], student: &[f64], k: usize) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(CoreError::InvalidArgument(
            "teacher and student logits differ in length".into(),
        ));
    }
    check_rows(teacher.len(), k, teacher.len() / k.max(1))?;
    let n = teacher.len() / k;
    let total: f64 = teacher
        .chunks(k)
        .zip(student.chunks(k))
        .map(|(t, s)| kl_from_log_probs(&log_softmax_row(t), &log_softmax_row(s)))
        .sum();
    Ok(total / n as f64)
}

/// Entropy in nats of one log-probability row.
pub fn entropy_from_log_probs(lp: &[f64]) -> f64 {
    -lp.iter()
        .filter(|&&a| a > f64::NEG_INFINITY)
        .map(|&a| a.exp() * a)
        .sum::<f64>()
}

pub fn mean_entropy_from_logits(logits: &[f64], k: usize) -> Result<f64> {
    check_rows(logits.len(), k, logits.len() / k.max(1))?;
    let n = logits.len() / k;
    let total: f64 = logits
        .chunks(k)
        .map(|r| entropy_from_log_probs(&log_softmax_row(r)))
        .sum();
    Ok((total / n as f64).clamp(0.0, (k as f64).ln()))
}

/// Fraction of rows whose argmax agrees.
pub fn top1_agreement_from_logits(a: &[f64], b: &[f64], k: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::InvalidArgument(
            "logit buffers differ in length".into(),
        ));
    }
    check_rows(a.len(), k, a.len() / k.max(1))?;
    let same = a
        .chunks(k)
        .zip(b.chunks(k))
        .filter(|(x, y)| argmax(x) == argmax(y))
        .count();
    Ok(same as f64 / (a.len() / k) as f64)
}

pub fn teacher_student_kl<T: Real, U: Real>(
    tg: &mut Graph<T>,
    teacher: &BlockNet,
    sg: &mut Graph<U>,
    student: &BlockNet,
    data: &Dataset,
) -> Result<f64> {
    let t = predict_logits(tg, teacher, data)?;
    let s = predict_logits(sg, student, data)?;
    mean_kl_from_logits(&t, &s, data.num_classes())
}

pub fn prediction_entropy<T: Real>(
    g: &mut Graph<T>,
    net: &BlockNet,
    data: &Dataset,
) -> Result<f64> {
    let logits = predict_logits(g, net, data)?;
    mean_entropy_from_logits(&logits, net.arch().num_classes)
}

fn center_columns(x: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for j in 0..p {
        let mean = (0..n).map(|i| x[i * p + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * p + j] -= mean;
        }
    }
    out
}

/// Squared Frobenius norm of `aᵀ b` for row-major `a: [n, p]`, `b: [n, q]`.
fn cross_frobenius_sq(a: &[f64], p: usize, b: &[f64], q: usize, n: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..p {
        for j in 0..q {
            let dot: f64 = (0..n).map(|r| a[r * p + i] * b[r * q + j]).sum();
            acc += dot * dot;
        }
    }
    acc
}

/// Linear CKA between row-major activations `x: [n, p]` and `y: [n, q]`.
pub fn cka_linear(x: &[f64], p: usize, y: &[f64], q: usize) -> Result<f64> {
    if p == 0 || q == 0 || x.len() % p != 0 || y.len() % q != 0 || x.len() / p != y.len() / q {
        return Err(CoreError::InvalidArgument(format!(
            "CKA inputs of {} and {} values do not share a row count for widths {p} and {q}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() / p;
    if n < 3 {
        return Err(CoreError::InvalidArgument(format!(
            "CKA needs at least 3 rows, got {n}"
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(CoreError::InvalidArgument("CKA input is not finite".into()));
    }
    let xc = center_columns(x, n, p);
    let yc = center_columns(y, n, q);
    let xy = cross_frobenius_sq(&yc, q, &xc, p, n);
    let xx = cross_frobenius_sq(&xc, p, &xc, p, n).sqrt();
    let yy = cross_frobenius_sq(&yc, q, &yc, q, n).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(CoreError::InvalidArgument(
            "CKA input has zero variance".into(),
        ));
    }
    Ok(xy / (xx * yy))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Mean per-sample `KL(teacher ‖ student)` in nats.
    pub mean_kl: f64,
    /// Linear CKA of pooled last-block features.
    pub cka: f64,
    pub top1_agreement: f64,
    pub teacher_entropy: f64,
    pub student_entropy: f64,
}

/// Model outputs needed by [`SimilarityReport`].
#[derive(Clone, Debug)]
pub struct Outputs {
    pub logits: Vec<f64>,
    pub features: Vec<f64>,
    pub feature_dim: usize,
}

impl Outputs {
    pub fn collect<T: Real>(g: &mut Graph<T>, net: &BlockNet, data: &Dataset) -> Result<Self> {
        Ok(Self {
            logits: predict_logits(g, net, data)?,
            features: pooled_features(g, net, data)?,
            feature_dim: net.arch().feature_dim(),
        })
    }
}

impl SimilarityReport {
    pub fn from_outputs(teacher: &Outputs, student: &Outputs, k: usize) -> Result<Self> {
        Ok(Self {
            mean_kl: mean_kl_from_logits(&teacher.logits, &student.logits, k)?,
            cka: cka_linear(
                &teacher.features,
                teacher.feature_dim,
                &student.features,
                student.feature_dim,
            )?,
            top1_agreement: top1_agreement_from_logits(&teacher.logits, &student.logits, k)?,
            teacher_entropy: mean_entropy_from_logits(&teacher.logits, k)?,
            student_entropy: mean_entropy_from_logits(&student.logits, k)?,
        })
    }
}

/// Outcome of a linear probe on frozen features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub extractor_hash_before: String,
    pub extractor_hash_after: String,
}

/// Trains a fresh linear classifier on the frozen, pooled last-block
/// features of `extractor` and reports its accuracy on `target_test`.
pub fn linear_probe_transfer<T: Real>(
    g: &mut Graph<T>,
    extractor: &BlockNet,
    target_train: &Dataset,
    target_test: &Dataset,
    sgd: &SgdConfig,
    seed: u64,
) -> Result<ProbeResult> {
    if target_train.num_classes() != target_test.num_classes() {
        return Err(CoreError::InvalidArgument(format!(
            "probe train set has {} classes, test set {}",
            target_train.num_classes(),
            target_test.num_classes()
        )));
    }
    let before = extractor.state_hash(g);
    let dim = extractor.arch().feature_dim();
    let k = target_train.num_classes();
    let train_feats = pooled_features(g, extractor, target_train)?;
    let test_feats = pooled_features(g, extractor, target_test)?;

    let mut pg = Graph::<T>::new();
    let head = Head::allocate(&mut pg, dim, k)?;
    head.init(&mut pg, &mut stream_rng(seed, streams::PROBE_INIT))?;
    let rows = |feats: &[f64], idx: &[usize]| {
        let data = idx
            .iter()
            .flat_map(|&i| feats[i * dim..(i + 1) * dim].iter().map(|&v| T::lit(v)))
            .collect();
        Tensor::new(vec![idx.len(), dim], data)
    };
    if sgd.epochs > 0 {
        run_epochs(
            &mut pg,
            target_train,
            sgd,
            seed,
            |pg, idx| {
                let x = pg.constant(rows(&train_feats, idx)?);
                let labels: Vec<usize> = idx.iter().map(|&i| target_train.labels()[i]).collect();
                let logits = head.classify(pg, x)?;
                let loss = cross_entropy(pg, logits, &labels)?;
                Ok(StepOutput {
                    loss,
                    components: Vec::new(),
                    correct: count_correct(pg.data(logits), k, &labels),
                })
            },
            |_, _| Ok(None),
        )?;
    }
    let mut logits = Vec::with_capacity(target_test.len() * k);
    let all: Vec<usize> = (0..target_test.len()).collect();
    pg.set_recording(false);
    for chunk in all.chunks(EVAL_BATCH) {
        pg.reset();
        let x = pg.constant(rows(&test_feats, chunk)?);
        let y = head.classify(&mut pg, x)?;
        logits.extend(pg.data(y).iter().map(|v| v.as_f64()));
    }
    Ok(ProbeResult {
        accuracy: accuracy_from_logits(&logits, k, target_test.labels())?,
        extractor_hash_before: before,
        extractor_hash_after: extractor.state_hash(g),
    })
}
