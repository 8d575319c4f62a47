//! Teachers trained with student branches attached to their block outputs.
//!
//! Branch `i` (1-based, `1 ≤ i < N`) adapts the output of teacher block `i`
//! to the input of student block `i + 1` with a transform layer and runs the
//! remaining student blocks plus a student head. Only the teacher trunk
//! survives training; branches and transforms are discarded.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sftn_tensor::{Conv2dOpts, ConvTranspose2dOpts, Graph, Real, Tensor, Var};

use crate::arch::{NetArch, Shape3};
use crate::blocknet::{he_normal, BatchNorm, Block, BlockNet, Head, Mode};
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::losses::{add_weighted, cross_entropy, kl_divergence};
use crate::metrics;
use crate::rng::{stream_rng, streams};
use crate::trainer::{count_correct, run_epochs, EpochLog, SgdConfig, StepOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_t: f64,
    pub lambda_kl: f64,
    pub lambda_ce: f64,
    /// Temperature of the branch/teacher KL term.
    pub tau_tilde: f64,
    /// Temperature of the distillation stage.
    pub tau_kd: f64,
    pub lambda_kd: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_t: 1.0,
            lambda_kl: 3.0,
            lambda_ce: 1.0,
            tau_tilde: 1.0,
            tau_kd: 4.0,
            lambda_kd: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        for (name, v) in [
            ("lambda_t", self.lambda_t),
            ("lambda_kl", self.lambda_kl),
            ("lambda_ce", self.lambda_ce),
            ("lambda_kd", self.lambda_kd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CoreError::config(
                    format!("{path}.{name}"),
                    format!("must be nonnegative, got {v}"),
                ));
            }
        }
        for (name, v) in [("tau_tilde", self.tau_tilde), ("tau_kd", self.tau_kd)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CoreError::config(
                    format!("{path}.{name}"),
                    format!("must be positive, got {v}"),
                ));
            }
        }
        Ok(())
    }

    /// True when the branch terms vanish and the objective is plain teacher CE.
    pub fn is_standard(&self) -> bool {
        self.lambda_kl == 0.0 && self.lambda_ce == 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    /// 3×3 convolution, stride 2, padding 1.
    Downsample,
    /// 4×4 transposed convolution, stride 2, padding 1.
    Upsample,
    /// 1×1 convolution.
    Project,
}

/// Geometry of an adapter from a teacher feature map to a student block input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformLayer {
    pub kind: TransformKind,
    pub in_shape: Shape3,
    pub out_shape: Shape3,
}

impl TransformLayer {
    pub fn weight_shape(&self) -> Vec<usize> {
        let (ci, co) = (self.in_shape[0], self.out_shape[0]);
        match self.kind {
            TransformKind::Downsample => vec![co, ci, 3, 3],
            TransformKind::Upsample => vec![ci, co, 4, 4],
            TransformKind::Project => vec![co, ci, 1, 1],
        }
    }

    fn fan_in(&self) -> usize {
        let ci = self.in_shape[0];
        match self.kind {
            TransformKind::Downsample => ci * 9,
            // Each output pixel of a stride-2 4×4 transposed conv sees 2×2 taps per input channel.
            TransformKind::Upsample => ci * 16 / 4,
            TransformKind::Project => ci,
        }
    }
}

/// Picks the adapter whose output matches `student_shape` exactly.
pub fn make_transform(teacher_shape: Shape3, student_shape: Shape3) -> Result<TransformLayer> {
    let [c, h, w] = teacher_shape;
    let [c2, h2, w2] = student_shape;
    if c == 0 || c2 == 0 || h == 0 || w == 0 || h2 == 0 || w2 == 0 {
        return Err(CoreError::config(
            "transform",
            format!("empty feature shape {teacher_shape:?} -> {student_shape:?}"),
        ));
    }
    let kind = if (h2, w2) == (h, w) {
        TransformKind::Project
    } else if (h2, w2) == (h.div_ceil(2), w.div_ceil(2)) && h > 1 && w > 1 {
        TransformKind::Downsample
    } else if (h2, w2) == (2 * h, 2 * w) {
        TransformKind::Upsample
    } else {
        return Err(CoreError::config(
            "transform",
            format!(
                "unsupported spatial ratio {h}x{w} -> {h2}x{w2}; only halving, doubling or equal sizes are allowed"
            ),
        ));
    };
    Ok(TransformLayer {
        kind,
        in_shape: teacher_shape,
        out_shape: student_shape,
    })
}

/// A transform layer with its parameters: conv, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct Transform {
    pub layer: TransformLayer,
    pub weight: Var,
    pub bn: BatchNorm,
}

impl Transform {
    pub fn allocate<T: Real>(layer: TransformLayer, g: &mut Graph<T>) -> Result<Self> {
        let weight = g.add_param(Tensor::zeros(layer.weight_shape()), true)?;
        let bn = BatchNorm::allocate(g, layer.out_shape[0])?;
        Ok(Self { layer, weight, bn })
    }

    pub fn init<T: Real>(&self, g: &mut Graph<T>, rng: &mut impl rand::Rng) -> Result<()> {
        let numel = self.layer.weight_shape().iter().product();
        let w = he_normal(rng, numel, self.layer.fan_in());
        g.value_mut(self.weight)?.data_mut().copy_from_slice(&w);
        self.bn.reset(g)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = match self.layer.kind {
            TransformKind::Downsample => g.conv2d(
                x,
                self.weight,
                Conv2dOpts {
                    stride: 2,
                    pad: 1,
                    groups: 1,
                },
            )?,
            TransformKind::Upsample => {
                g.conv_transpose2d(x, self.weight, ConvTranspose2dOpts { stride: 2, pad: 1 })?
            }
            TransformKind::Project => g.conv2d(x, self.weight, Conv2dOpts::default())?,
        };
        let y = self.bn.forward(g, y, mode)?;
        Ok(g.relu(y)?)
    }

    fn params(&self) -> Vec<Var> {
        let mut v = vec![self.weight];
        v.extend(self.bn.state());
        v
    }
}

/// Transform plus student suffix attached after teacher block `index`.
#[derive(Clone, Debug)]
pub struct Branch {
    pub index: usize,
    pub transform: Transform,
    pub blocks: Vec<Block>,
    pub head: Head,
}

impl Branch {
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        teacher_feature: Var,
        mode: Mode,
    ) -> Result<Var> {
        let mut h = self.transform.forward(g, teacher_feature, mode)?;
        for block in &self.blocks {
            h = block.forward(g, h, mode)?;
        }
        self.head.forward(g, h)
    }

    pub fn params(&self) -> Vec<Var> {
        let mut v = self.transform.params();
        v.extend(self.blocks.iter().flat_map(Block::state));
        v.extend(self.head.state());
        v
    }
}

#[derive(Clone, Debug)]
pub struct SftnModel {
    teacher: BlockNet,
    student: NetArch,
    branches: Vec<Branch>,
}

/// Logits of one SFTN forward pass. Probabilities are derived from these by
/// the losses (tempered for the KL term, plain for CE).
#[derive(Clone, Debug)]
pub struct SftnOutputs {
    pub teacher: Var,
    /// `(branch index, logits)` in increasing branch order.
    pub branches: Vec<(usize, Var)>,
}

/// Branch indices `1..N` when `mask` is `None`, else the validated mask.
pub fn resolve_branches(num_blocks: usize, mask: Option<&[usize]>) -> Result<Vec<usize>> {
    let Some(mask) = mask else {
        return Ok((1..num_blocks).collect());
    };
    let mut out = mask.to_vec();
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err(CoreError::config(
            "branches",
            "at least one branch is required",
        ));
    }
    if let Some(&bad) = out.iter().find(|&&b| b == 0 || b >= num_blocks) {
        return Err(CoreError::config(
            "branches",
            format!(
                "branch {bad} is invalid: a {num_blocks}-block teacher has branches 1..={}",
                num_blocks - 1
            ),
        ));
    }
    Ok(out)
}

impl SftnModel {
    /// Teacher parameters are registered first, so a teacher-only graph and
    /// an SFTN graph share parameter indices.
    pub fn allocate<T: Real>(
        teacher_arch: &NetArch,
        student_arch: &NetArch,
        branches: Option<&[usize]>,
        g: &mut Graph<T>,
    ) -> Result<Self> {
        teacher_arch.validate()?;
        student_arch.validate()?;
        let n = teacher_arch.num_blocks();
        if student_arch.num_blocks() != n {
            return Err(CoreError::ArchMismatch(format!(
                "teacher `{}` has {n} blocks, student `{}` has {}",
                teacher_arch.name,
                student_arch.name,
                student_arch.num_blocks()
            )));
        }
        if student_arch.input_shape != teacher_arch.input_shape
            || student_arch.num_classes != teacher_arch.num_classes
        {
            return Err(CoreError::ArchMismatch(format!(
                "teacher `{}` and student `{}` disagree on input shape or class count",
                teacher_arch.name, student_arch.name
            )));
        }
        let indices = resolve_branches(n, branches)?;
        let teacher = BlockNet::allocate(teacher_arch, g)?;
        let mut out = Vec::with_capacity(indices.len());
        for i in indices {
            let layer = make_transform(
                teacher_arch.blocks[i - 1].output_shape,
                student_arch.blocks[i].input_shape,
            )?;
            let transform = Transform::allocate(layer, g)?;
            let blocks = student_arch.blocks[i..]
                .iter()
                .map(|spec| Block::allocate(spec, g))
                .collect::<Result<Vec<_>>>()?;
            let head = Head::allocate(g, student_arch.feature_dim(), student_arch.num_classes)?;
            out.push(Branch {
                index: i,
                transform,
                blocks,
                head,
            });
        }
        Ok(Self {
            teacher,
            student: student_arch.clone(),
            branches: out,
        })
    }

    /// Teacher draws from the same stream as a standalone teacher; branches
    /// draw from their own stream.
    pub fn build<T: Real>(
        teacher_arch: &NetArch,
        student_arch: &NetArch,
        branches: Option<&[usize]>,
        g: &mut Graph<T>,
        seed: u64,
    ) -> Result<Self> {
        let model = Self::allocate(teacher_arch, student_arch, branches, g)?;
        model.teacher.init_params(g, seed)?;
        model.init_branches(g, seed)?;
        Ok(model)
    }

    pub fn init_branches<T: Real>(&self, g: &mut Graph<T>, seed: u64) -> Result<()> {
        let mut rng = stream_rng(seed, streams::BRANCH_INIT);
        for b in &self.branches {
            b.transform.init(g, &mut rng)?;
            for block in &b.blocks {
                block.init(g, &mut rng)?;
            }
            b.head.init(g, &mut rng)?;
        }
        Ok(())
    }

    pub fn teacher(&self) -> &BlockNet {
        &self.teacher
    }

    pub fn student_arch(&self) -> &NetArch {
        &self.student
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn branch_params(&self) -> Vec<Var> {
        self.branches.iter().flat_map(Branch::params).collect()
    }

    /// Teacher trunk in `trunk_mode`, branches in `branch_mode`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        trunk_mode: Mode,
        branch_mode: Mode,
    ) -> Result<SftnOutputs> {
        let taps = self.teacher.forward_with_taps(g, x, trunk_mode)?;
        let mut branches = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            branches.push((
                b.index,
                b.forward(g, taps.features[b.index - 1], branch_mode)?,
            ));
        }
        Ok(SftnOutputs {
            teacher: taps.logits,
            branches,
        })
    }

    /// Trunk-only checkpoint, loadable as a plain [`BlockNet`].
    pub fn teacher_checkpoint<T: Real>(&self, g: &Graph<T>) -> Checkpoint {
        self.teacher.to_checkpoint(g)
    }
}

/// Both modes at once; see [`SftnModel::forward`].
pub fn sftn_forward<T: Real>(
    model: &SftnModel,
    g: &mut Graph<T>,
    x: Var,
    mode: Mode,
) -> Result<SftnOutputs> {
    model.forward(g, x, mode, mode)
}

#[derive(Clone, Copy, Debug)]
pub struct SftnLoss {
    pub total: Var,
    pub teacher_ce: f64,
    /// Branch-averaged `KL(q̃_branch ‖ q̃_teacher)`.
    pub branch_kl: f64,
    /// Branch-averaged CE of the branch predictions.
    pub branch_ce: f64,
}

/// `λ_T·CE(teacher) + λ_KL·mean_i KL(q̃_i ‖ q̃_T) + λ_CE·mean_i CE(branch_i)`.
///
/// Every component is evaluated for reporting; only terms with nonzero
/// weight enter the differentiated total.
pub fn sftn_loss<T: Real>(
    g: &mut Graph<T>,
    out: &SftnOutputs,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<SftnLoss> {
    cfg.validate("loss")?;
    if labels.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let teacher_ce = cross_entropy(g, out.teacher, labels)?;
    let mut total = add_weighted(g, None, teacher_ce, cfg.lambda_t)?;
    let (mut kl_sum, mut ce_sum) = (None, None);
    for &(_, logits) in &out.branches {
        let kl = kl_divergence(g, logits, out.teacher, cfg.tau_tilde)?;
        let ce = cross_entropy(g, logits, labels)?;
        kl_sum = add_weighted(g, kl_sum, kl, 1.0)?;
        ce_sum = add_weighted(g, ce_sum, ce, 1.0)?;
    }
    let inv = 1.0 / out.branches.len().max(1) as f64;
    let read = |g: &Graph<T>, v: Option<Var>| {
        v.map_or(0.0, |v| {
            g.value(v).item().map_or(f64::NAN, Real::as_f64) * inv
        })
    };
    let (branch_kl, branch_ce) = (read(g, kl_sum), read(g, ce_sum));
    if let Some(kl) = kl_sum {
        total = add_weighted(g, total, kl, cfg.lambda_kl * inv)?;
    }
    if let Some(ce) = ce_sum {
        total = add_weighted(g, total, ce, cfg.lambda_ce * inv)?;
    }
    let total = match total {
        Some(t) => t,
        // Every weight is zero: a constant loss with no gradient.
        None => g.scale(teacher_ce, T::zero())?,
    };
    Ok(SftnLoss {
        total,
        teacher_ce: g.value(teacher_ce).item().map_or(f64::NAN, Real::as_f64),
        branch_kl,
        branch_ce,
    })
}

/// Result of a teacher training run: the trunk checkpoint and per-epoch logs.
#[derive(Clone, Debug)]
pub struct TeacherRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// State hash of the trunk after each epoch of a frozen-trunk phase.
    pub frozen_trunk_hashes: Vec<String>,
    pub wall_seconds: f64,
}

fn test_accuracy<T: Real>(
    g: &mut Graph<T>,
    net: &BlockNet,
    test: Option<&Dataset>,
) -> Result<Option<f64>> {
    test.map(|d| metrics::accuracy(g, net, d)).transpose()
}

/// Cross-entropy training of a teacher on its own.
pub fn train_standard(
    arch: &NetArch,
    train: &Dataset,
    sgd: &SgdConfig,
    seed: u64,
    test: Option<&Dataset>,
) -> Result<TeacherRun> {
    let start = Instant::now();
    sgd.validate("sgd")?;
    let mut g = Graph::<f32>::new();
    let net = BlockNet::build(arch, &mut g, seed)?;
    let k = arch.num_classes;
    let log = run_epochs(
        &mut g,
        train,
        sgd,
        seed,
        |g, idx| {
            let (x, labels) = train.gather::<f32>(idx);
            let x = g.constant(x);
            let logits = net.forward(g, x, Mode::Train)?;
            let loss = cross_entropy(g, logits, &labels)?;
            let ce = g.value(loss).item().map_or(f64::NAN, Real::as_f64);
            Ok(StepOutput {
                loss,
                components: vec![("teacher_ce", ce)],
                correct: count_correct(g.data(logits), k, &labels),
            })
        },
        |g, _| test_accuracy(g, &net, test),
    )?;
    Ok(TeacherRun {
        checkpoint: net.to_checkpoint(&g),
        log,
        frozen_trunk_hashes: Vec::new(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn sftn_epochs(
    g: &mut Graph<f32>,
    model: &SftnModel,
    train: &Dataset,
    sgd: &SgdConfig,
    loss_cfg: &LossConfig,
    seed: u64,
    trunk_mode: Mode,
    test: Option<&Dataset>,
    mut after: impl FnMut(&Graph<f32>),
) -> Result<Vec<EpochLog>> {
    let k = model.teacher.arch().num_classes;
    run_epochs(
        g,
        train,
        sgd,
        seed,
        |g, idx| {
            let (x, labels) = train.gather::<f32>(idx);
            let x = g.constant(x);
            let out = model.forward(g, x, trunk_mode, Mode::Train)?;
            let l = sftn_loss(g, &out, &labels, loss_cfg)?;
            Ok(StepOutput {
                loss: l.total,
                components: vec![
                    ("teacher_ce", l.teacher_ce),
                    ("branch_kl", l.branch_kl),
                    ("branch_ce", l.branch_ce),
                ],
                correct: count_correct(g.data(out.teacher), k, &labels),
            })
        },
        |g, _| {
            after(g);
            test_accuracy(g, &model.teacher, test)
        },
    )
}

/// Joint training of teacher and branches; returns the trunk only.
pub fn train_sftn(
    teacher_arch: &NetArch,
    student_arch: &NetArch,
    branches: Option<&[usize]>,
    train: &Dataset,
    sgd: &SgdConfig,
    loss_cfg: &LossConfig,
    seed: u64,
    test: Option<&Dataset>,
) -> Result<TeacherRun> {
    let start = Instant::now();
    sgd.validate("sgd")?;
    loss_cfg.validate("loss")?;
    let mut g = Graph::<f32>::new();
    let model = SftnModel::build(teacher_arch, student_arch, branches, &mut g, seed)?;
    let log = sftn_epochs(
        &mut g,
        &model,
        train,
        sgd,
        loss_cfg,
        seed,
        Mode::Train,
        test,
        |_| {},
    )?;
    Ok(TeacherRun {
        checkpoint: model.teacher_checkpoint(&g),
        log,
        frozen_trunk_hashes: Vec::new(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Starts from a trained teacher: `epochs_branch_only` epochs train the
/// branches against a frozen trunk (parameters and batch-norm statistics),
/// then `epochs_joint` epochs train everything under the full objective.
/// Each phase runs `sgd`'s schedule rescaled to its own length.
pub fn finetune_sftn_from_pretrained(
    pretrained: &Checkpoint,
    student_arch: &NetArch,
    branches: Option<&[usize]>,
    epochs_branch_only: usize,
    epochs_joint: usize,
    train: &Dataset,
    sgd: &SgdConfig,
    loss_cfg: &LossConfig,
    seed: u64,
    test: Option<&Dataset>,
) -> Result<TeacherRun> {
    let start = Instant::now();
    loss_cfg.validate("loss")?;
    let mut g = Graph::<f32>::new();
    let model = SftnModel::allocate(&pretrained.arch, student_arch, branches, &mut g)?;
    model.teacher.load_state(&mut g, pretrained)?;
    model.init_branches(&mut g, seed)?;

    let phase1 = sgd.rescaled(epochs_branch_only);
    phase1.validate("sgd")?;
    model.teacher.set_trainable(&mut g, false)?;
    let mut hashes = Vec::with_capacity(epochs_branch_only);
    let mut log = if epochs_branch_only > 0 {
        sftn_epochs(
            &mut g,
            &model,
            train,
            &phase1,
            loss_cfg,
            seed,
            Mode::Eval,
            test,
            |g| hashes.push(model.teacher.state_hash(g)),
        )?
    } else {
        Vec::new()
    };
    model.teacher.set_trainable(&mut g, true)?;

    if epochs_joint > 0 {
        let phase2 = sgd.rescaled(epochs_joint);
        phase2.validate("sgd")?;
        // Distinct shuffles from phase 1.
        let seed2 = seed.wrapping_add(1 << 40);
        let joint = sftn_epochs(
            &mut g,
            &model,
            train,
            &phase2,
            loss_cfg,
            seed2,
            Mode::Train,
            test,
            |_| {},
        )?;
        log.extend(joint.into_iter().map(|mut e| {
            e.epoch += epochs_branch_only;
            e
        }));
    }
    Ok(TeacherRun {
        checkpoint: model.teacher_checkpoint(&g),
        log,
        frozen_trunk_hashes: hashes,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
