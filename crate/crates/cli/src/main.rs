use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use sftn_core::experiment::{
    cmd_distill, cmd_eval, cmd_probe, cmd_report, cmd_sweep, cmd_train_teacher, resolve_out_root,
    with_threads, CommandOutput, ExperimentConfig, SweepAxis, OUT_DIR_ENV,
};

#[derive(Parser)]
#[command(
    name = "sftn",
    version,
    about = "Student-aware teacher training and knowledge distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (run directories are created below it).
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// Worker threads; seeds and sweep points run in parallel.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher (standard, sftn or sftn-ft) for every seed.
    TrainTeacher(Common),
    /// Distill a student from each seed's teacher.
    Distill(Common),
    /// Teacher training plus distillation over one axis of values.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// tau_tilde, lambda_kl, lambda_ce, lambda_t or branches; defaults to the config's sweep.
        #[arg(long)]
        axis: Option<String>,
        /// JSON array of values, e.g. `[1,3,6,10]` or `[[1],[2],[1,2]]`.
        #[arg(long)]
        values: Option<String>,
    },
    /// Compare standard and SFTN distillation reports.
    Report {
        /// Run directories holding distillation reports.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Test accuracy and prediction entropy of a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Linear probe of a frozen checkpoint on the transfer task.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn summarize(out: &CommandOutput) {
    let r = &out.report;
    for s in &r.seeds {
        match s.student_test_acc {
            Some(acc) => println!(
                "seed {}: teacher {:.4}, student {:.4}, student {}",
                s.seed,
                s.teacher_test_acc,
                acc,
                s.student_checkpoint_hash.as_deref().unwrap_or("-")
            ),
            None => println!(
                "seed {}: teacher {:.4}, checkpoint {}",
                s.seed, s.teacher_test_acc, s.teacher_checkpoint_hash
            ),
        }
    }
    if let Some(a) = &r.aggregate {
        match a.student_acc {
            Some(m) => println!(
                "student accuracy {:.4} ± {:.4} over {} seeds",
                m.mean, m.std, m.n
            ),
            None => println!(
                "teacher accuracy {:.4} ± {:.4} over {} seeds",
                a.teacher_acc.mean, a.teacher_acc.std, a.teacher_acc.n
            ),
        }
    }
    for row in &r.sweep {
        println!(
            "{}={} seed {}: teacher {:.4}, student {:.4}",
            row.axis, row.value, row.seed, row.teacher_acc, row.student_acc
        );
    }
    println!(
        "report {} ({})",
        out.report_path.display(),
        r.content_hash()
    );
}

fn run_pipeline(
    common: &Common,
    cfg: ExperimentConfig,
    f: impl FnOnce(ExperimentConfig, &Path) -> sftn_core::Result<CommandOutput> + Send,
) -> Result<()> {
    let root = resolve_out_root(common.out.as_deref(), &cfg);
    info!("config hash {}", cfg.hash());
    let out = with_threads(common.threads, || f(cfg, &root))??;
    summarize(&out);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher(c) => run_pipeline(&c, c.load()?, cmd_train_teacher),
        Command::Distill(c) => run_pipeline(&c, c.load()?, cmd_distill),
        Command::Sweep {
            common,
            axis,
            values,
        } => {
            let cfg = common.load()?;
            let axis = match (axis, &cfg.sweep) {
                (Some(a), _) => SweepAxis::parse(&a)?,
                (None, Some(s)) => s.axis,
                (None, None) => bail!("no sweep axis: pass --axis or set `sweep` in the config"),
            };
            let values: Vec<serde_json::Value> = match (values, &cfg.sweep) {
                (Some(v), _) => {
                    serde_json::from_str(&v).context("--values must be a JSON array")?
                }
                (None, Some(s)) => s.values.clone(),
                (None, None) => {
                    bail!("no sweep values: pass --values or set `sweep` in the config")
                }
            };
            run_pipeline(&common, cfg, move |cfg, root| {
                cmd_sweep(cfg, axis, &values, root)
            })
        }
        Command::Report { runs, out } => {
            let c = cmd_report(&runs, &out)?;
            for r in &c.rows {
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "{} {} {}: standard {} / {} {} / delta {}",
                    r.student_arch,
                    r.method,
                    &r.dataset_id[..12.min(r.dataset_id.len())],
                    fmt(r.standard_student_acc),
                    if r.arm.is_empty() { "-" } else { &r.arm },
                    fmt(r.arm_student_acc),
                    fmt(r.delta)
                );
            }
            for u in &c.unpaired {
                println!("unpaired: {u}");
            }
            println!("wrote {}", out.join("comparison.csv").display());
            Ok(())
        }
        Command::Eval { config, checkpoint } => {
            let cfg = ExperimentConfig::load(&config)?;
            let r = cmd_eval(&cfg, &checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(())
        }
        Command::Probe {
            config,
            checkpoint,
            seed,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let r = cmd_probe(&cfg, &checkpoint, seed)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
