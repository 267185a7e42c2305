use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use cmc_core::archive::KnowledgeBaseArchive;
use cmc_core::config::ExperimentConfig;
use cmc_core::net::RestorationNet;
use cmc_core::report::{write_file, write_reports, JsonlLog};
use cmc_core::tasks::{EvalSet, Image};
use cmc_core::trainer::{evaluate, run_sequence, EpochRecord, SequenceData, SequenceReport, StepRecord, TrainObserver};
use cmc_core::{DType, Error, Real, Result};

#[derive(Args)]
pub struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Continue from a knowledge-base archive written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Train every task without the frozen-kernel term.
    #[arg(long)]
    no_sharing: bool,
    /// Override the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Resume even if the archive was produced by a different config.
    #[arg(long)]
    force: bool,
    /// Output directory; defaults to the config's output_dir, then runs/latest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Save (degraded | restored | clean) PNG strips after each task.
    #[arg(long)]
    dump_png: bool,
}

const PNG_SAMPLES: usize = 4;

struct CliObserver<'a> {
    out: &'a Path,
    log: JsonlLog,
    config: &'a ExperimentConfig,
    config_hash: String,
    evals: Option<Vec<EvalSet>>,
    last_report: Option<SequenceReport>,
}

impl CliObserver<'_> {
    fn archive<T: Real>(&self, net: &RestorationNet<T>, report: Option<SequenceReport>) -> KnowledgeBaseArchive<T> {
        let names = self
            .config
            .tasks
            .iter()
            .take(net.task_ids().len())
            .map(|t| t.name.clone())
            .collect();
        KnowledgeBaseArchive::new(net.clone(), names, self.config_hash.clone(), self.config.seed, report)
    }

    fn dump_png<T: Real>(&self, net: &RestorationNet<T>, task: usize) -> Result<()> {
        let Some(evals) = &self.evals else {
            return Ok(());
        };
        let dir = self.out.join("png");
        fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        let spec = &self.config.tasks[task - 1];
        for (i, (degraded, clean)) in evals[task - 1].pairs.iter().take(PNG_SAMPLES).enumerate() {
            let out = net.forward(&Image::stack::<T>(&[degraded])?, spec.task_id)?;
            let restored = Image::from_tensor(&out, 0)?;
            let strip = Image::hconcat(&[degraded, &restored, clean])?;
            let path = dir.join(format!("task{}_{}_{i}.png", spec.task_id, spec.name));
            strip.to_rgb8().save(&path)?;
        }
        Ok(())
    }
}

impl<T: Real> TrainObserver<T> for CliObserver<'_> {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        self.log.record("step", record)
    }

    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        self.log.record("epoch", record)?;
        self.log.flush()
    }

    fn on_task_frozen(&mut self, net: &RestorationNet<T>, report: &SequenceReport) -> Result<()> {
        let task = report.completed();
        self.archive(net, Some(report.clone()))
            .save(&self.out.join(format!("kb_after_task_{task}.cmckb")))?;
        write_reports(self.out, report)?;
        self.dump_png(net, task)?;
        let row: Vec<Option<f64>> = report.psnr.iter().map(|r| r[task - 1]).collect();
        self.log
            .record("task_frozen", &serde_json::json!({ "task_id": task, "psnr": row }))?;
        self.log.flush()?;
        self.last_report = Some(report.clone());
        Ok(())
    }
}

/// Replaces the stored matrices with evaluations on this config's data, which
/// may differ from the data the archive was trained against. Frozen outputs do
/// not change, so every column after a task's freeze gets the same value.
fn rebaseline<T: Real>(report: &mut SequenceReport, net: &RestorationNet<T>, cfg: &ExperimentConfig) -> Result<()> {
    let data = SequenceData::new(&cfg.data, cfg.seed)?;
    let done = report.completed().min(cfg.tasks.len());
    for (i, spec) in cfg.tasks.iter().enumerate().take(done) {
        let e = evaluate(net, spec.task_id, &data.eval_set(spec)?)?;
        report.names[i] = spec.name.clone();
        for j in i..done {
            report.psnr[i][j] = Some(e.psnr);
            report.ssim[i][j] = Some(e.ssim);
        }
    }
    Ok(())
}

fn run_typed<T: Real>(cfg: &ExperimentConfig, args: &RunArgs, out: &Path) -> Result<()> {
    let config_hash = cfg.hash();
    let (mut net, prior) = match &args.resume {
        Some(path) => {
            let archive = KnowledgeBaseArchive::<T>::load(path)?;
            archive.check_geometry(&cfg.network)?;
            let mut report = archive.report;
            if archive.config_hash != config_hash {
                if !args.force {
                    return Err(Error::ConfigHashMismatch {
                        archive: archive.config_hash,
                        config: config_hash,
                    });
                }
                if let Some(r) = &mut report {
                    rebaseline(r, &archive.net, cfg)?;
                }
            }
            (archive.net, report)
        }
        None => (RestorationNet::<T>::new(cfg.network.clone())?, None),
    };
    let data = SequenceData::new(&cfg.data, cfg.seed)?;
    let evals = if args.dump_png {
        Some(cfg.tasks.iter().map(|t| data.eval_set(t)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let header = serde_json::json!({
        "config_hash": config_hash,
        "seed": cfg.seed,
        "dtype": T::DTYPE,
        "resumed_after": net.frozen_through(),
    });
    let mut observer = CliObserver {
        out,
        log: JsonlLog::create(&out.join("log.jsonl"), &header)?,
        config: cfg,
        config_hash,
        evals,
        last_report: prior.clone(),
    };
    match run_sequence(
        &mut net,
        &cfg.tasks,
        &data,
        &cfg.schedule,
        cfg.seed,
        prior,
        &mut observer,
    ) {
        Ok(report) => {
            observer
                .log
                .record("done", &serde_json::json!({ "final_psnr": report.final_psnr() }))?;
            observer.log.flush()?;
            print!("{}", cmc_core::report::psnr_matrix_csv(&report)?);
            Ok(())
        }
        Err(e) => {
            // whatever was frozen survives; the failed task was rolled back
            let checkpoint = out.join("kb_checkpoint.cmckb");
            let saved = observer.archive(&net, observer.last_report.clone()).save(&checkpoint);
            let _ = observer.log.record(
                "error",
                &serde_json::json!({
                    "kind": e.kind(),
                    "message": e.to_string(),
                    "checkpoint": saved.is_ok().then(|| checkpoint.display().to_string()),
                }),
            );
            let _ = observer.log.flush();
            Err(e)
        }
    }
}

pub fn run(args: RunArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.no_sharing {
        cfg.disable_sharing();
    }
    cfg.validate()?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs/latest"));
    fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    write_file(&out.join("config.resolved.toml"), &cfg.to_toml()?)?;
    match cfg.dtype {
        DType::F32 => run_typed::<f32>(&cfg, &args, &out),
        DType::F64 => run_typed::<f64>(&cfg, &args, &out),
    }
}
