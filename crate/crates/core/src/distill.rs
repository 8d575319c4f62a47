//! Training a student against a frozen teacher: KD, and KD combined with
//! FitNets hints or similarity-preserving (SP) feature losses.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sftn_tensor::{Conv2dOpts, Graph, Real, Tensor, Var};

use crate::arch::NetArch;
use crate::blocknet::{he_normal, BlockNet, Mode};
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::losses::{add_weighted, cross_entropy, kl_divergence, mse};
use crate::metrics;
use crate::rng::{stream_rng, streams};
use crate::trainer::{count_correct, run_epochs, EpochLog, SgdConfig, StepOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "kd")]
    Kd,
    #[serde(rename = "fitnets")]
    FitNets,
    #[serde(rename = "sp")]
    Sp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Kd => "kd",
            Method::FitNets => "fitnets",
            Method::Sp => "sp",
        }
    }
}

/// Feature-based methods always add the KD term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub method: Method,
    pub tau_kd: f64,
    pub lambda_kd: f64,
    /// Feature-loss weight; `None` picks the method default (1 for FitNets, 100 for SP).
    pub lambda_hint: Option<f64>,
    /// 1-based block indices; `None` means every interior block for FitNets
    /// and the last block for SP.
    pub hint_blocks: Option<Vec<usize>>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            method: Method::Kd,
            tau_kd: 4.0,
            lambda_kd: 1.0,
            lambda_hint: None,
            hint_blocks: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.tau_kd > 0.0 && self.tau_kd.is_finite()) {
            return Err(CoreError::config(
                format!("{path}.tau_kd"),
                format!("must be positive, got {}", self.tau_kd),
            ));
        }
        if !(self.lambda_kd >= 0.0 && self.lambda_kd.is_finite()) {
            return Err(CoreError::config(
                format!("{path}.lambda_kd"),
                format!("must be nonnegative, got {}", self.lambda_kd),
            ));
        }
        if let Some(l) = self.lambda_hint {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(CoreError::config(
                    format!("{path}.lambda_hint"),
                    format!("must be nonnegative, got {l}"),
                ));
            }
        }
        Ok(())
    }

    pub fn hint_weight(&self) -> f64 {
        self.lambda_hint.unwrap_or(match self.method {
            Method::Kd => 0.0,
            Method::FitNets => 1.0,
            Method::Sp => 100.0,
        })
    }

    /// Resolved 0-based hinted blocks for an `n`-block pair; empty for KD.
    pub fn blocks(&self, n: usize) -> Result<Vec<usize>> {
        if self.method == Method::Kd {
            return Ok(Vec::new());
        }
        let one_based = match &self.hint_blocks {
            Some(b) => b.clone(),
            None if self.method == Method::FitNets => (1..n).collect(),
            None => vec![n],
        };
        let mut out: Vec<usize> = Vec::with_capacity(one_based.len());
        for b in one_based {
            if b == 0 || b > n {
                return Err(CoreError::config(
                    "distill.hint_blocks",
                    format!("block {b} outside 1..={n}"),
                ));
            }
            out.push(b - 1);
        }
        out.sort_unstable();
        out.dedup();
        if out.is_empty() {
            return Err(CoreError::config(
                "distill.hint_blocks",
                "no blocks selected",
            ));
        }
        Ok(out)
    }
}

/// `CE(student, y) + λ_KD·τ²·KL(softmax(t/τ) ‖ softmax(s/τ))`. Teacher
/// logits should be a constant node.
pub fn kd_loss<T: Real>(
    g: &mut Graph<T>,
    student: Var,
    teacher: Var,
    labels: &[usize],
    tau: f64,
    lambda_kd: f64,
) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(CoreError::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let ce = cross_entropy(g, student, labels)?;
    if lambda_kd == 0.0 {
        return Ok(ce);
    }
    let kl = kl_divergence(g, teacher, student, tau)?;
    Ok(add_weighted(g, Some(ce), kl, lambda_kd * tau * tau)?.expect("nonzero weight"))
}

/// 1×1 convolution from student to teacher channels.
#[derive(Clone, Copy, Debug)]
pub struct Regressor {
    pub weight: Var,
}

impl Regressor {
    pub fn allocate<T: Real>(
        g: &mut Graph<T>,
        student_channels: usize,
        teacher_channels: usize,
    ) -> Result<Self> {
        let weight = g.add_param(
            Tensor::zeros(vec![teacher_channels, student_channels, 1, 1]),
            true,
        )?;
        Ok(Self { weight })
    }

    pub fn init<T: Real>(&self, g: &mut Graph<T>, rng: &mut impl rand::Rng) -> Result<()> {
        let shape = g.shape(self.weight).to_vec();
        let w = he_normal(rng, shape.iter().product(), shape[1]);
        g.value_mut(self.weight)?.data_mut().copy_from_slice(&w);
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        Ok(g.conv2d(x, self.weight, Conv2dOpts::default())?)
    }
}

/// Student and teacher features of 0-based block `b`.
fn block_pair(student_feats: &[Var], teacher_feats: &[Var], b: usize) -> Result<(Var, Var)> {
    match (student_feats.get(b), teacher_feats.get(b)) {
        (Some(&s), Some(&t)) => Ok((s, t)),
        _ => Err(CoreError::config(
            "distill.hint_blocks",
            format!(
                "block {} is out of range ({} student, {} teacher blocks)",
                b + 1,
                student_feats.len(),
                teacher_feats.len()
            ),
        )),
    }
}

/// Mean over hinted blocks of `MSE(regressor(student_i), teacher_i)`.
/// `regressors[j]` serves `blocks[j]`.
pub fn fitnets_hint_loss<T: Real>(
    g: &mut Graph<T>,
    student_feats: &[Var],
    teacher_feats: &[Var],
    regressors: &[Regressor],
    blocks: &[usize],
) -> Result<Var> {
    if blocks.is_empty() || regressors.len() != blocks.len() {
        return Err(CoreError::config(
            "distill.hint_blocks",
            format!(
                "{} regressors for {} hinted blocks",
                regressors.len(),
                blocks.len()
            ),
        ));
    }
    let mut total = None;
    for (&b, reg) in blocks.iter().zip(regressors) {
        let (s, t) = block_pair(student_feats, teacher_feats, b)?;
        if g.shape(s)[2..] != g.shape(t)[2..] {
            return Err(CoreError::config(
                "distill.hint_blocks",
                format!(
                    "block {}: student features {:?} and teacher features {:?} differ spatially",
                    b + 1,
                    g.shape(s),
                    g.shape(t)
                ),
            ));
        }
        let r = reg.forward(g, s)?;
        let term = mse(g, r, t)?;
        total = add_weighted(g, total, term, 1.0)?;
    }
    let total = total.expect("at least one block");
    Ok(g.scale(total, T::lit(1.0 / blocks.len() as f64))?)
}

/// Row-normalized batch similarity `normalize(A·Aᵀ)` of `[b, ...]` features.
fn batch_similarity<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1..].iter().product()])?;
    let at = g.transpose(flat)?;
    let gram = g.matmul(flat, at)?;
    Ok(g.row_l2_normalize(gram)?)
}

/// Mean over hinted blocks of `‖G_S − G_T‖_F² / b²`.
pub fn sp_loss<T: Real>(
    g: &mut Graph<T>,
    student_feats: &[Var],
    teacher_feats: &[Var],
    blocks: &[usize],
) -> Result<Var> {
    if blocks.is_empty() {
        return Err(CoreError::config(
            "distill.hint_blocks",
            "no blocks selected",
        ));
    }
    let mut total = None;
    for &blk in blocks {
        let (s, t) = block_pair(student_feats, teacher_feats, blk)?;
        let b = g.shape(s)[0];
        if b < 2 || g.shape(t)[0] != b {
            return Err(CoreError::InvalidArgument(format!(
                "similarity-preserving loss needs a shared batch of at least 2 samples, got {b} and {}",
                g.shape(t)[0]
            )));
        }
        let gs = batch_similarity(g, s)?;
        let gt = batch_similarity(g, t)?;
        let d = g.sub(gs, gt)?;
        let sq = g.mul(d, d)?;
        let sum = g.sum(sq)?;
        let term = g.scale(sum, T::lit(1.0 / (b * b) as f64))?;
        total = add_weighted(g, total, term, 1.0)?;
    }
    let total = total.expect("at least one block");
    Ok(g.scale(total, T::lit(1.0 / blocks.len() as f64))?)
}

/// Eval-mode teacher outputs over a dataset: logits and the hinted block features.
struct TeacherTargets {
    logits: Vec<f32>,
    k: usize,
    /// `(block, per-sample width, features)` for each hinted block.
    feats: Vec<(usize, Vec<usize>, Vec<f32>)>,
}

impl TeacherTargets {
    fn compute(
        g: &mut Graph<f32>,
        teacher: &BlockNet,
        data: &Dataset,
        blocks: &[usize],
    ) -> Result<Self> {
        let k = teacher.arch().num_classes;
        let mut logits = Vec::with_capacity(data.len() * k);
        let mut feats: Vec<(usize, Vec<usize>, Vec<f32>)> = blocks
            .iter()
            .map(|&b| (b, teacher.block_output_shape(b).to_vec(), Vec::new()))
            .collect();
        let idx: Vec<usize> = (0..data.len()).collect();
        g.set_recording(false);
        for chunk in idx.chunks(metrics::EVAL_BATCH) {
            g.reset();
            let (x, _) = data.gather::<f32>(chunk);
            let x = g.constant(x);
            let taps = teacher.forward_with_taps(g, x, Mode::Eval)?;
            logits.extend_from_slice(g.data(taps.logits));
            for (b, _, buf) in &mut feats {
                buf.extend_from_slice(g.data(taps.features[*b]));
            }
        }
        g.reset();
        g.set_recording(true);
        Ok(Self { logits, k, feats })
    }

    fn rows<T: Real>(buf: &[f32], width: usize, idx: &[usize]) -> Vec<T> {
        idx.iter()
            .flat_map(|&i| {
                buf[i * width..(i + 1) * width]
                    .iter()
                    .map(|&v| T::lit(v as f64))
            })
            .collect()
    }
}

/// Result of one distillation run.
#[derive(Clone, Debug)]
pub struct DistillRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub teacher_hash_before: String,
    pub teacher_hash_after: String,
    pub test_accuracy: Option<f64>,
    pub wall_seconds: f64,
}

/// Trains a fresh student (initialized from `seed`) against a frozen teacher.
///
/// Teacher logits and features are computed once, in eval mode, for the
/// whole training set; they are identical to per-batch evaluation because
/// eval-mode outputs depend only on the sample.
pub fn distill_train(
    student_arch: &NetArch,
    teacher_ckpt: &Checkpoint,
    train: &Dataset,
    test: Option<&Dataset>,
    dcfg: &DistillConfig,
    sgd: &SgdConfig,
    seed: u64,
) -> Result<DistillRun> {
    let start = Instant::now();
    dcfg.validate("distill")?;
    sgd.validate("sgd")?;
    let t_arch = &teacher_ckpt.arch;
    if t_arch.input_shape != student_arch.input_shape
        || t_arch.num_classes != student_arch.num_classes
    {
        return Err(CoreError::ArchMismatch(format!(
            "teacher `{}` ({:?}, {} classes) and student `{}` ({:?}, {} classes) are incompatible",
            t_arch.name,
            t_arch.input_shape,
            t_arch.num_classes,
            student_arch.name,
            student_arch.input_shape,
            student_arch.num_classes
        )));
    }
    let blocks = dcfg.blocks(t_arch.num_blocks())?;
    if !blocks.is_empty() && t_arch.num_blocks() != student_arch.num_blocks() {
        return Err(CoreError::ArchMismatch(format!(
            "feature distillation pairs blocks, but teacher has {} and student {}",
            t_arch.num_blocks(),
            student_arch.num_blocks()
        )));
    }

    let mut tg = Graph::<f32>::new();
    let teacher = BlockNet::from_checkpoint(teacher_ckpt, &mut tg)?;
    teacher.set_trainable(&mut tg, false)?;
    let teacher_hash_before = teacher.state_hash(&tg);
    let targets = TeacherTargets::compute(&mut tg, &teacher, train, &blocks)?;

    let mut g = Graph::<f32>::new();
    let student = BlockNet::build(student_arch, &mut g, seed)?;
    let mut regressors = Vec::new();
    if dcfg.method == Method::FitNets {
        let mut rng = stream_rng(seed, streams::REGRESSOR_INIT);
        for &b in &blocks {
            let r = Regressor::allocate(
                &mut g,
                student.block_output_shape(b)[0],
                teacher.block_output_shape(b)[0],
            )?;
            r.init(&mut g, &mut rng)?;
            regressors.push(r);
        }
    }
    let hint_weight = dcfg.hint_weight();
    let k = targets.k;
    let n_blocks = student_arch.num_blocks();

    let log = run_epochs(
        &mut g,
        train,
        sgd,
        seed,
        |g, idx| {
            let (x, labels) = train.gather::<f32>(idx);
            let x = g.constant(x);
            let out = student.forward_with_taps(g, x, Mode::Train)?;
            let t_logits = g.constant(Tensor::new(
                vec![idx.len(), k],
                TeacherTargets::rows(&targets.logits, k, idx),
            )?);
            let kd = kd_loss(
                g,
                out.logits,
                t_logits,
                &labels,
                dcfg.tau_kd,
                dcfg.lambda_kd,
            )?;
            let mut components = vec![("kd", g.value(kd).item().map_or(f64::NAN, Real::as_f64))];
            let mut loss = kd;
            // A trailing single-sample batch has no batch similarity to match.
            let skip_sp = dcfg.method == Method::Sp && idx.len() < 2;
            if dcfg.method != Method::Kd && !skip_sp {
                let mut t_feats = vec![x; n_blocks];
                for (b, shape, buf) in &targets.feats {
                    let width = shape.iter().product();
                    let mut full = vec![idx.len()];
                    full.extend(shape);
                    t_feats[*b] =
                        g.constant(Tensor::new(full, TeacherTargets::rows(buf, width, idx))?);
                }
                let hint = match dcfg.method {
                    Method::FitNets => {
                        fitnets_hint_loss(g, &out.features, &t_feats, &regressors, &blocks)?
                    }
                    _ => sp_loss(g, &out.features, &t_feats, &blocks)?,
                };
                components.push(("hint", g.value(hint).item().map_or(f64::NAN, Real::as_f64)));
                loss = add_weighted(g, Some(loss), hint, hint_weight)?.expect("kd term present");
            }
            Ok(StepOutput {
                loss,
                components,
                correct: count_correct(g.data(out.logits), k, &labels),
            })
        },
        |g, _| test.map(|d| metrics::accuracy(g, &student, d)).transpose(),
    )?;

    let test_accuracy = match (log.last(), test) {
        (Some(e), _) => e.test_acc,
        (None, Some(d)) => Some(metrics::accuracy(&mut g, &student, d)?),
        (None, None) => None,
    };
    Ok(DistillRun {
        checkpoint: student.to_checkpoint(&g),
        log,
        teacher_hash_before,
        teacher_hash_after: teacher.state_hash(&tg),
        test_accuracy,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
