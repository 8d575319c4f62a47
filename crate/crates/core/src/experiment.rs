//! Config-driven pipeline: teacher training, distillation, sweeps and
//! comparison reports, each writing checkpoints and JSON/CSV reports under a
//! run directory named after the config hash.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sftn_tensor::Graph;
use sha2::{Digest, Sha256};

use crate::arch::{ArchRef, NetArch};
use crate::blocknet::BlockNet;
use crate::checkpoint::Checkpoint;
use crate::data::{gen_synth_vision_with, load_idx, Dataset, SynthParams, SynthTask};
use crate::distill::{distill_train, DistillConfig, Method};
use crate::error::{CoreError, Result};
use crate::metrics::{self, Outputs, SimilarityReport};
use crate::sftn::{
    finetune_sftn_from_pretrained, resolve_branches, train_sftn, train_standard, LossConfig,
    TeacherRun,
};
use crate::trainer::{EpochLog, SgdConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "SFTN_OUT_DIR";
pub const DEFAULT_OUT_ROOT: &str = "runs";
pub const KL_CONVENTION: &str = "mean over samples of KL(teacher || student), nats";

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    #[default]
    Standard,
    Sftn,
    SftnFt,
}

impl TeacherMode {
    pub fn name(self) -> &'static str {
        match self {
            TeacherMode::Standard => "standard",
            TeacherMode::Sftn => "sftn",
            TeacherMode::SftnFt => "sftn-ft",
        }
    }
}

fn default_task() -> SynthTask {
    SynthTask::Primary
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synth {
        #[serde(default = "default_task")]
        task: SynthTask,
        /// Total samples before the 5:1 train/test split.
        size: usize,
        seed: u64,
        #[serde(default)]
        params: SynthParams,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Sfds {
        path: PathBuf,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Synth {
                task,
                size,
                seed,
                params,
            } => gen_synth_vision_with(*task, *size, *seed, params),
            DatasetSpec::Idx { images, labels } => load_idx(images, labels),
            DatasetSpec::Sfds { path } => Dataset::load_sfds(path),
        }
    }

    /// Stratified 5:1 train/test split.
    pub fn load_split(&self) -> Result<Split> {
        let full = self.load()?;
        let (train, test) = full.split_stratified(5, 1)?;
        Ok(Split {
            id: full.id().to_string(),
            train,
            test,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    /// Content hash of the unsplit dataset.
    pub id: String,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs_branch_only: usize,
    pub epochs_joint: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs_branch_only: 4,
            epochs_joint: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub sgd: SgdConfig,
    /// Target dataset; defaults to the transfer task of a synthetic source.
    pub dataset: Option<DatasetSpec>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig {
                weight_decay: 0.0,
                ..SgdConfig::default()
            },
            dataset: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TauTilde,
    LambdaKl,
    LambdaCe,
    LambdaT,
    Branches,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::TauTilde => "tau_tilde",
            SweepAxis::LambdaKl => "lambda_kl",
            SweepAxis::LambdaCe => "lambda_ce",
            SweepAxis::LambdaT => "lambda_t",
            SweepAxis::Branches => "branches",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| CoreError::config("sweep.axis", format!("unknown axis `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    /// Numbers for the loss axes; arrays of 1-based branch indices for `branches`.
    pub values: Vec<serde_json::Value>,
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub teacher: ArchRef,
    pub student: ArchRef,
    #[serde(default)]
    pub teacher_mode: TeacherMode,
    #[serde(default)]
    pub loss: LossConfig,
    /// Active student branches (1-based); all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branches: Option<Vec<usize>>,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub teacher_sgd: SgdConfig,
    #[serde(default)]
    pub student_sgd: SgdConfig,
    pub dataset: DatasetSpec,
    pub seeds: Vec<u64>,
    /// Teacher used by `distill` for every seed instead of the run directory's own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
    /// Starting point of `sftn-ft`; a standard teacher is trained when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_teacher: Option<PathBuf>,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    /// Output root; not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let mut cfg: Self = serde_json::from_value(raw.clone())
            .map_err(|e| CoreError::config("config", e.to_string()))?;
        if cfg.teacher_mode == TeacherMode::Standard {
            let given: Vec<&str> = ["lambda_kl", "lambda_ce"]
                .into_iter()
                .filter(|k| raw.pointer(&format!("/loss/{k}")).is_some())
                .collect();
            if !given.is_empty() {
                cfg.warnings.push(format!(
                    "teacher_mode is standard; branch loss terms {} are ignored",
                    given.join(", ")
                ));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            CoreError::config(
                path.display().to_string(),
                format!("cannot read config: {e}"),
            )
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CoreError::config("seeds", "at least one seed is required"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(CoreError::config(
                "name",
                "must be a nonempty file-name-safe string",
            ));
        }
        self.loss.validate("loss")?;
        self.distill.validate("distill")?;
        self.teacher_sgd.validate("teacher_sgd")?;
        self.student_sgd.validate("student_sgd")?;
        self.probe.sgd.validate("probe.sgd")?;
        if let DatasetSpec::Synth { size, .. } = &self.dataset {
            if *size == 0 {
                return Err(CoreError::config("dataset.size", "must be positive"));
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(CoreError::config("sweep.values", "empty value list"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding the output root.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = None;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn architectures(&self, num_classes: usize) -> Result<(NetArch, NetArch)> {
        let t = self.teacher.resolve(num_classes)?;
        let s = self.student.resolve(num_classes)?;
        if t.input_shape != s.input_shape {
            return Err(CoreError::config(
                "student",
                format!(
                    "input shape {:?} differs from teacher's {:?}",
                    s.input_shape, t.input_shape
                ),
            ));
        }
        Ok((t, s))
    }

    /// `root/<name>-<first 12 hex digits of the config hash>`.
    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(format!("{}-{}", self.name, &self.hash()[..12]))
    }
}

/// Explicit path, else the config's `out_dir`, else `$SFTN_OUT_DIR`, else `runs`.
pub fn resolve_out_root(explicit: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub teacher_checkpoint_hash: String,
    pub teacher_test_acc: f64,
    #[serde(default)]
    pub teacher_epochs: Vec<EpochLog>,
    #[serde(default)]
    pub frozen_trunk_hashes: Vec<String>,
    pub student_checkpoint_hash: Option<String>,
    pub student_test_acc: Option<f64>,
    #[serde(default)]
    pub student_epochs: Vec<EpochLog>,
    pub teacher_unchanged: Option<bool>,
    pub similarity: Option<SimilarityReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub teacher_acc: MeanStd,
    pub student_acc: Option<MeanStd>,
    pub mean_kl: Option<MeanStd>,
    pub cka: Option<MeanStd>,
    pub teacher_entropy: Option<MeanStd>,
    pub student_entropy: Option<MeanStd>,
}

impl Aggregate {
    fn of(seeds: &[SeedReport]) -> Option<Self> {
        let pick = |f: &dyn Fn(&SeedReport) -> Option<f64>| {
            MeanStd::of(&seeds.iter().filter_map(f).collect::<Vec<_>>())
        };
        Some(Self {
            teacher_acc: pick(&|s| Some(s.teacher_test_acc))?,
            student_acc: pick(&|s| s.student_test_acc),
            mean_kl: pick(&|s| s.similarity.as_ref().map(|r| r.mean_kl)),
            cka: pick(&|s| s.similarity.as_ref().map(|r| r.cka)),
            teacher_entropy: pick(&|s| s.similarity.as_ref().map(|r| r.teacher_entropy)),
            student_entropy: pick(&|s| s.similarity.as_ref().map(|r| r.student_entropy)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub teacher_acc: f64,
    pub student_acc: f64,
}

/// Wall-clock data; excluded from [`RunReport::content_hash`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub name: String,
    pub config_hash: String,
    pub dataset_id: String,
    pub teacher_arch: String,
    pub student_arch: String,
    pub teacher_mode: TeacherMode,
    pub method: Option<Method>,
    pub kl_convention: String,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub seeds: Vec<SeedReport>,
    pub aggregate: Option<Aggregate>,
    #[serde(default)]
    pub sweep: Vec<SweepRow>,
    pub timing: Option<Timing>,
}

impl RunReport {
    fn new(command: &str, cfg: &ExperimentConfig, dataset_id: &str) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            command: command.into(),
            name: cfg.name.clone(),
            config_hash: cfg.hash(),
            dataset_id: dataset_id.into(),
            teacher_arch: cfg.teacher.id().into(),
            student_arch: cfg.student.id().into(),
            teacher_mode: cfg.teacher_mode,
            method: None,
            kl_convention: KL_CONVENTION.into(),
            warnings: cfg.warnings.clone(),
            seeds: Vec::new(),
            aggregate: None,
            sweep: Vec::new(),
            timing: None,
        }
    }

    /// SHA-256 of the report JSON without timing.
    pub fn content_hash(&self) -> String {
        let mut r = self.clone();
        r.timing = None;
        hex::encode(Sha256::digest(
            serde_json::to_vec(&r).expect("report serializes"),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = serde_json::from_slice(&fs::read(path)?)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(CoreError::Format(format!(
                "{}: report schema {} (expected {REPORT_SCHEMA_VERSION})",
                path.display(),
                r.schema_version
            )));
        }
        Ok(r)
    }
}

/// Sidecar describing how a teacher checkpoint was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSidecar {
    pub checkpoint_hash: String,
    pub teacher_mode: TeacherMode,
    pub loss: Option<LossConfig>,
    pub branches: Option<Vec<usize>>,
    pub seed: u64,
    pub epochs: usize,
    pub dataset_id: String,
    pub config_hash: String,
}

/// Runs `f` on a rayon pool of `threads` workers (all cores when `None`).
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n.max(1));
    }
    let pool = b
        .build()
        .map_err(|e| CoreError::InvalidArgument(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Context shared by the commands: resolved config, data and output directory.
pub struct Session {
    pub cfg: ExperimentConfig,
    pub data: Split,
    pub teacher_arch: NetArch,
    pub student_arch: NetArch,
    pub dir: PathBuf,
}

impl Session {
    pub fn open(cfg: ExperimentConfig, out_root: &Path) -> Result<Self> {
        cfg.validate()?;
        let data = cfg.dataset.load_split()?;
        let (teacher_arch, student_arch) = cfg.architectures(data.train.num_classes())?;
        for w in &cfg.warnings {
            log::warn!("{w}");
        }
        let dir = cfg.run_dir(out_root);
        fs::create_dir_all(&dir)?;
        Ok(Self {
            cfg,
            data,
            teacher_arch,
            student_arch,
            dir,
        })
    }

    pub fn teacher_path(&self, mode: TeacherMode, seed: u64) -> PathBuf {
        self.dir
            .join(format!("teacher-{}-seed{seed}.ckpt", mode.name()))
    }

    pub fn student_path(&self, seed: u64) -> PathBuf {
        self.dir.join(format!(
            "student-{}-{}-seed{seed}.ckpt",
            self.cfg.distill.method.name(),
            self.cfg.teacher_mode.name()
        ))
    }

    fn branches(&self) -> Option<&[usize]> {
        self.cfg.branches.as_deref()
    }

    /// Trains the configured teacher for one seed and writes checkpoint and sidecar.
    pub fn train_teacher(&self, seed: u64) -> Result<(TeacherRun, SeedReport)> {
        let cfg = &self.cfg;
        let (train, test) = (&self.data.train, &self.data.test);
        let run = match cfg.teacher_mode {
            TeacherMode::Standard => train_standard(
                &self.teacher_arch,
                train,
                &cfg.teacher_sgd,
                seed,
                Some(test),
            )?,
            TeacherMode::Sftn => train_sftn(
                &self.teacher_arch,
                &self.student_arch,
                self.branches(),
                train,
                &cfg.teacher_sgd,
                &cfg.loss,
                seed,
                Some(test),
            )?,
            TeacherMode::SftnFt => {
                let pretrained = match &cfg.pretrained_teacher {
                    Some(p) => load_checkpoint(p)?,
                    None => {
                        let base = train_standard(
                            &self.teacher_arch,
                            train,
                            &cfg.teacher_sgd,
                            seed,
                            None,
                        )?;
                        base.checkpoint
                            .save(self.teacher_path(TeacherMode::Standard, seed))?;
                        base.checkpoint
                    }
                };
                finetune_sftn_from_pretrained(
                    &pretrained,
                    &self.student_arch,
                    self.branches(),
                    cfg.finetune.epochs_branch_only,
                    cfg.finetune.epochs_joint,
                    train,
                    &cfg.teacher_sgd,
                    &cfg.loss,
                    seed,
                    Some(test),
                )?
            }
        };
        let path = self.teacher_path(cfg.teacher_mode, seed);
        run.checkpoint.save(&path)?;
        let hash = run.checkpoint.hash();
        let sidecar = TeacherSidecar {
            checkpoint_hash: hash.clone(),
            teacher_mode: cfg.teacher_mode,
            loss: (cfg.teacher_mode != TeacherMode::Standard).then(|| cfg.loss.clone()),
            branches: match cfg.teacher_mode {
                TeacherMode::Standard => None,
                _ => Some(resolve_branches(
                    self.teacher_arch.num_blocks(),
                    self.branches(),
                )?),
            },
            seed,
            epochs: run.log.len(),
            dataset_id: self.data.id.clone(),
            config_hash: cfg.hash(),
        };
        fs::write(
            path.with_extension("json"),
            serde_json::to_vec_pretty(&sidecar)?,
        )?;
        let teacher_test_acc = checkpoint_accuracy(&run.checkpoint, test)?;
        let report = SeedReport {
            seed,
            teacher_checkpoint_hash: hash,
            teacher_test_acc,
            teacher_epochs: run.log.clone(),
            frozen_trunk_hashes: run.frozen_trunk_hashes.clone(),
            ..SeedReport::default()
        };
        Ok((run, report))
    }

    pub fn teacher_for(&self, seed: u64) -> Result<Checkpoint> {
        let path = match &self.cfg.teacher_checkpoint {
            Some(p) => p.clone(),
            None => self.teacher_path(self.cfg.teacher_mode, seed),
        };
        load_checkpoint(&path)
    }

    /// Distills the configured student from `teacher` for one seed.
    pub fn distill(&self, teacher: &Checkpoint, seed: u64) -> Result<SeedReport> {
        let (train, test) = (&self.data.train, &self.data.test);
        let run = distill_train(
            &self.student_arch,
            teacher,
            train,
            Some(test),
            &self.cfg.distill,
            &self.cfg.student_sgd,
            seed,
        )?;
        run.checkpoint.save(self.student_path(seed))?;
        let (to, t_acc) = checkpoint_outputs(teacher, test)?;
        let (so, s_acc) = checkpoint_outputs(&run.checkpoint, test)?;
        let similarity = SimilarityReport::from_outputs(&to, &so, test.num_classes())?;
        Ok(SeedReport {
            seed,
            teacher_checkpoint_hash: run.teacher_hash_before.clone(),
            teacher_test_acc: t_acc,
            teacher_unchanged: Some(run.teacher_hash_before == run.teacher_hash_after),
            student_checkpoint_hash: Some(run.checkpoint.hash()),
            student_test_acc: Some(s_acc),
            student_epochs: run.log,
            similarity: Some(similarity),
            ..SeedReport::default()
        })
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CoreError::MissingCheckpoint(path.display().to_string()));
    }
    Checkpoint::load(path)
}

fn checkpoint_outputs(ckpt: &Checkpoint, data: &Dataset) -> Result<(Outputs, f64)> {
    let mut g = Graph::<f32>::new();
    let net = BlockNet::from_checkpoint(ckpt, &mut g)?;
    let out = Outputs::collect(&mut g, &net, data)?;
    let acc = metrics::accuracy_from_logits(&out.logits, data.num_classes(), data.labels())?;
    Ok((out, acc))
}

pub fn checkpoint_accuracy(ckpt: &Checkpoint, data: &Dataset) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let net = BlockNet::from_checkpoint(ckpt, &mut g)?;
    metrics::accuracy(&mut g, &net, data)
}

fn finish(mut report: RunReport, seeds: Vec<SeedReport>, start: Instant) -> RunReport {
    report.aggregate = Aggregate::of(&seeds);
    report.seeds = seeds;
    report.timing = Some(Timing {
        wall_seconds: start.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
    });
    report
}

/// Output of a command: its report and where it was written.
#[derive(Clone, Debug)]
pub struct CommandOutput {
    pub report: RunReport,
    pub dir: PathBuf,
    pub report_path: PathBuf,
}

/// Trains the configured teacher for every seed (in parallel on the
/// current rayon pool).
pub fn cmd_train_teacher(cfg: ExperimentConfig, out_root: &Path) -> Result<CommandOutput> {
    let start = Instant::now();
    let s = Session::open(cfg, out_root)?;
    let seeds = s
        .cfg
        .seeds
        .par_iter()
        .map(|&seed| s.train_teacher(seed).map(|(_, r)| r))
        .collect::<Result<Vec<_>>>()?;
    let report = finish(
        RunReport::new("train-teacher", &s.cfg, &s.data.id),
        seeds,
        start,
    );
    let report_path = s
        .dir
        .join(format!("train-teacher-{}.json", s.cfg.teacher_mode.name()));
    report.save(&report_path)?;
    Ok(CommandOutput {
        report,
        dir: s.dir,
        report_path,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillCsvRow {
    pub seed: String,
    pub teacher_mode: String,
    pub method: String,
    pub teacher_acc: f64,
    pub student_acc: f64,
    pub mean_kl: f64,
    pub cka: f64,
    pub top1_agreement: f64,
    pub teacher_entropy: f64,
    pub student_entropy: f64,
}

/// Distills one student per seed from that seed's teacher and aggregates.
pub fn cmd_distill(cfg: ExperimentConfig, out_root: &Path) -> Result<CommandOutput> {
    let start = Instant::now();
    let s = Session::open(cfg, out_root)?;
    let seeds = s
        .cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let teacher = s.teacher_for(seed)?;
            s.distill(&teacher, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = RunReport::new("distill", &s.cfg, &s.data.id);
    report.method = Some(s.cfg.distill.method);
    let report = finish(report, seeds, start);
    let stem = format!(
        "distill-{}-{}",
        s.cfg.distill.method.name(),
        s.cfg.teacher_mode.name()
    );
    let report_path = s.dir.join(format!("{stem}.json"));
    report.save(&report_path)?;
    write_distill_csv(&report, &s.dir.join(format!("{stem}.csv")))?;
    Ok(CommandOutput {
        report,
        dir: s.dir,
        report_path,
    })
}

fn write_distill_csv(report: &RunReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mode = report.teacher_mode.name().to_string();
    let method = report.method.map_or("", Method::name).to_string();
    for s in &report.seeds {
        let (Some(acc), Some(sim)) = (s.student_test_acc, &s.similarity) else {
            continue;
        };
        w.serialize(DistillCsvRow {
            seed: s.seed.to_string(),
            teacher_mode: mode.clone(),
            method: method.clone(),
            teacher_acc: s.teacher_test_acc,
            student_acc: acc,
            mean_kl: sim.mean_kl,
            cka: sim.cka,
            top1_agreement: sim.top1_agreement,
            teacher_entropy: sim.teacher_entropy,
            student_entropy: sim.student_entropy,
        })?;
    }
    if let Some(a) = &report.aggregate {
        let get = |m: &Option<MeanStd>, f: fn(&MeanStd) -> f64| m.as_ref().map_or(f64::NAN, f);
        for (label, f) in [
            ("mean", (|m: &MeanStd| m.mean) as fn(&MeanStd) -> f64),
            ("std", |m: &MeanStd| m.std),
        ] {
            let top1 = MeanStd::of(
                &report
                    .seeds
                    .iter()
                    .filter_map(|s| s.similarity.as_ref().map(|r| r.top1_agreement))
                    .collect::<Vec<_>>(),
            );
            w.serialize(DistillCsvRow {
                seed: label.into(),
                teacher_mode: mode.clone(),
                method: method.clone(),
                teacher_acc: f(&a.teacher_acc),
                student_acc: get(&a.student_acc, f),
                mean_kl: get(&a.mean_kl, f),
                cka: get(&a.cka, f),
                top1_agreement: get(&top1, f),
                teacher_entropy: get(&a.teacher_entropy, f),
                student_entropy: get(&a.student_entropy, f),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

fn sweep_point(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    value: &serde_json::Value,
) -> Result<(String, ExperimentConfig)> {
    let mut c = cfg.clone();
    c.teacher_mode = TeacherMode::Sftn;
    let path = format!("sweep.values[{value}]");
    let num = || {
        value.as_f64().ok_or_else(|| {
            CoreError::config(&path, format!("axis {} expects numbers", axis.name()))
        })
    };
    match axis {
        SweepAxis::TauTilde => c.loss.tau_tilde = num()?,
        SweepAxis::LambdaKl => c.loss.lambda_kl = num()?,
        SweepAxis::LambdaCe => c.loss.lambda_ce = num()?,
        SweepAxis::LambdaT => c.loss.lambda_t = num()?,
        SweepAxis::Branches => {
            let list: Vec<usize> = serde_json::from_value(value.clone()).map_err(|_| {
                CoreError::config(&path, "axis branches expects arrays of branch indices")
            })?;
            c.branches = Some(list);
        }
    }
    c.loss.validate(&path)?;
    let label = match axis {
        SweepAxis::Branches => value
            .as_array()
            .map(|a| {
                a.iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("+")
            })
            .unwrap_or_default(),
        _ => value.to_string(),
    };
    Ok((label, c))
}

/// One SFTN teacher plus one distilled student per (value, seed). Rows are
/// appended to the CSV as they complete, then rewritten in sweep order.
/// A failing point is logged and skipped; the command then returns the
/// first error after writing every completed row.
pub fn cmd_sweep(
    cfg: ExperimentConfig,
    axis: SweepAxis,
    values: &[serde_json::Value],
    out_root: &Path,
) -> Result<CommandOutput> {
    let start = Instant::now();
    if values.is_empty() {
        return Err(CoreError::config("sweep.values", "empty value list"));
    }
    let points = values
        .iter()
        .map(|v| sweep_point(&cfg, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let mut keyed = cfg.clone();
    keyed.sweep = Some(SweepConfig {
        axis,
        values: values.to_vec(),
    });
    let base = Session::open(keyed, out_root)?;
    let csv_path = base.dir.join(format!("sweep-{}.csv", axis.name()));
    let writer = Mutex::new(csv::Writer::from_path(&csv_path)?);
    let jobs: Vec<(usize, &(String, ExperimentConfig), u64)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| cfg.seeds.iter().map(move |&s| (i, p, s)))
        .collect();
    let results: Vec<(usize, Result<SweepRow>)> = jobs
        .par_iter()
        .map(|&(i, (label, pcfg), seed)| {
            let row = (|| {
                let s = Session {
                    cfg: pcfg.clone(),
                    data: base.data.clone(),
                    teacher_arch: base.teacher_arch.clone(),
                    student_arch: base.student_arch.clone(),
                    dir: base
                        .dir
                        .join(format!("{}-{}", axis.name(), sanitize(label))),
                };
                fs::create_dir_all(&s.dir)?;
                let (run, rep) = s.train_teacher(seed)?;
                let student = s.distill(&run.checkpoint, seed)?;
                let row = SweepRow {
                    axis: axis.name().into(),
                    value: label.clone(),
                    seed,
                    teacher_acc: rep.teacher_test_acc,
                    student_acc: student.student_test_acc.unwrap_or(f64::NAN),
                };
                let mut w = writer.lock().expect("sweep writer");
                w.serialize(&row)?;
                w.flush()?;
                Ok(row)
            })();
            if let Err(e) = &row {
                log::error!(
                    "sweep point {}={label} seed {seed} failed: {e}",
                    axis.name()
                );
            }
            (i, row)
        })
        .collect();
    drop(writer);

    let mut rows = Vec::new();
    let mut first_err = None;
    for (i, r) in results {
        match r {
            Ok(row) => rows.push((i, row)),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    rows.sort_by_key(|(i, r)| (*i, r.seed));
    let rows: Vec<SweepRow> = rows.into_iter().map(|(_, r)| r).collect();
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut report = RunReport::new("sweep", &base.cfg, &base.data.id);
    report.teacher_mode = TeacherMode::Sftn;
    report.method = Some(base.cfg.distill.method);
    report.sweep = rows;
    let report = finish(report, Vec::new(), start);
    let report_path = base.dir.join(format!("sweep-{}.json", axis.name()));
    report.save(&report_path)?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(CommandOutput {
            report,
            dir: base.dir,
            report_path,
        }),
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// One row of the standard-vs-SFTN comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub dataset_id: String,
    pub student_arch: String,
    pub method: String,
    pub arm: String,
    pub standard_student_acc: Option<f64>,
    pub arm_student_acc: Option<f64>,
    pub delta: Option<f64>,
    pub standard_kl: Option<f64>,
    pub arm_kl: Option<f64>,
    pub standard_cka: Option<f64>,
    pub arm_cka: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub schema_version: u32,
    pub rows: Vec<ComparisonRow>,
    /// Reports without a counterpart arm.
    pub unpaired: Vec<String>,
}

pub fn read_comparison_csv(path: &Path) -> Result<Vec<ComparisonRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Pairs distillation reports by (dataset, student, method) and reports
/// `Δ = arm − standard` for every non-standard teacher arm.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<Comparison> {
    type Key = (String, String, String);
    let mut groups: BTreeMap<Key, BTreeMap<TeacherMode, (RunReport, PathBuf)>> = BTreeMap::new();
    for dir in run_dirs {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|x| x == "json")
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("distill-"))
            })
            .collect();
        entries.sort();
        for path in entries {
            let r = RunReport::load(&path)?;
            let key = (
                r.dataset_id.clone(),
                r.student_arch.clone(),
                r.method.map_or("", Method::name).to_string(),
            );
            groups
                .entry(key)
                .or_default()
                .insert(r.teacher_mode, (r, path));
        }
    }
    let acc = |r: &RunReport| {
        r.aggregate
            .as_ref()
            .and_then(|a| a.student_acc.map(|m| m.mean))
    };
    let kl = |r: &RunReport| r.aggregate.as_ref().and_then(|a| a.mean_kl.map(|m| m.mean));
    let cka = |r: &RunReport| r.aggregate.as_ref().and_then(|a| a.cka.map(|m| m.mean));
    let mut rows = Vec::new();
    let mut unpaired = Vec::new();
    for ((dataset_id, student_arch, method), arms) in &groups {
        let standard = arms.get(&TeacherMode::Standard).map(|(r, _)| r);
        let others: Vec<_> = arms
            .iter()
            .filter(|(m, _)| **m != TeacherMode::Standard)
            .collect();
        let row = |arm: &str, other: Option<&RunReport>| {
            let (s_acc, a_acc) = (standard.and_then(acc), other.and_then(acc));
            ComparisonRow {
                dataset_id: dataset_id.clone(),
                student_arch: student_arch.clone(),
                method: method.clone(),
                arm: arm.into(),
                standard_student_acc: s_acc,
                arm_student_acc: a_acc,
                delta: s_acc.zip(a_acc).map(|(s, a)| a - s),
                standard_kl: standard.and_then(kl),
                arm_kl: other.and_then(kl),
                standard_cka: standard.and_then(cka),
                arm_cka: other.and_then(cka),
            }
        };
        if others.is_empty() {
            if let Some((_, p)) = arms.get(&TeacherMode::Standard) {
                unpaired.push(p.display().to_string());
            }
            rows.push(row("", None));
        }
        for (mode, (r, p)) in others {
            if standard.is_none() {
                unpaired.push(p.display().to_string());
            }
            rows.push(row(mode.name(), Some(r)));
        }
    }
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("comparison.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let comparison = Comparison {
        schema_version: REPORT_SCHEMA_VERSION,
        rows,
        unpaired,
    };
    let mut f = fs::File::create(out.join("comparison.json"))?;
    f.write_all(&serde_json::to_vec_pretty(&comparison)?)?;
    Ok(comparison)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_hash: String,
    pub arch: String,
    pub dataset_id: String,
    pub test_accuracy: f64,
    pub mean_entropy: f64,
}

/// Test-split accuracy and prediction entropy of a checkpoint.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    let data = cfg.dataset.load_split()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let (out, acc) = checkpoint_outputs(&ckpt, &data.test)?;
    Ok(EvalReport {
        checkpoint_hash: ckpt.hash(),
        arch: ckpt.arch.name.clone(),
        dataset_id: data.id,
        test_accuracy: acc,
        mean_entropy: metrics::mean_entropy_from_logits(&out.logits, data.test.num_classes())?,
    })
}

/// Linear probe of a frozen checkpoint on the configured target task.
pub fn cmd_probe(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    seed: u64,
) -> Result<metrics::ProbeResult> {
    let target = match (&cfg.probe.dataset, &cfg.dataset) {
        (Some(spec), _) => spec.clone(),
        (
            None,
            DatasetSpec::Synth {
                size, seed, params, ..
            },
        ) => DatasetSpec::Synth {
            task: SynthTask::Transfer,
            size: *size,
            seed: *seed,
            params: *params,
        },
        (None, _) => {
            return Err(CoreError::config(
                "probe.dataset",
                "required when the source dataset is not synthetic",
            ))
        }
    };
    let data = target.load_split()?;
    let ckpt = load_checkpoint(checkpoint)?;
    if ckpt.arch.input_shape != data.train.dims() {
        return Err(CoreError::ArchMismatch(format!(
            "probe images {:?} do not fit `{}` input {:?}",
            data.train.dims(),
            ckpt.arch.name,
            ckpt.arch.input_shape
        )));
    }
    let mut g = Graph::<f32>::new();
    let net = BlockNet::from_checkpoint(&ckpt, &mut g)?;
    net.set_trainable(&mut g, false)?;
    metrics::linear_probe_transfer(&mut g, &net, &data.train, &data.test, &cfg.probe.sgd, seed)
}
