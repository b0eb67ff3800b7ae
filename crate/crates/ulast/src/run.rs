//! A full training run: two-stage schedule, per-epoch held-out evaluation,
//! logs and checkpoint.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use ulast_core::net::Model;
use ulast_core::train::{sample_gradient, StepLog, Trainer};

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, heldout_set, EvalSummary};
use crate::formats::{write_file, JsonLines};
use crate::parallel::map_ordered;

pub const CHECKPOINT_FILE: &str = "checkpoint.ulst";
pub const TRAIN_LOG_FILE: &str = "train_log.txt";
pub const EPOCH_LOG_FILE: &str = "epochs.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub stage: &'static str,
    pub mean_loss: f64,
    pub heldout_mean_iou: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub steps: usize,
    pub train_seconds: f64,
    pub untrained: EvalSummary,
    pub trained: EvalSummary,
}

pub struct RunOutcome {
    pub model: Model,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochRecord>,
    pub metrics: RunMetrics,
}

/// One training step with batch items spread over `threads` workers;
/// identical to the sequential step for any thread count.
pub fn parallel_step(trainer: &mut Trainer, threads: usize) -> Result<StepLog> {
    let jobs = trainer.draw_jobs();
    let (stage, step) = (trainer.stage(), trainer.step);
    let outcomes = map_ordered(&jobs, threads, |j| sample_gradient(&trainer.model, &trainer.cfg, stage, step, j));
    Ok(trainer.apply(outcomes)?)
}

/// Trains from scratch per `cfg`, evaluating the held-out set before training
/// and after every epoch (or only at the end when `eval_every_epoch` is off).
/// With `out` set, writes the step log, epoch log, metrics, config and
/// checkpoint there.
pub fn train_run(cfg: &RunConfig, out: Option<&Path>, threads: usize) -> Result<RunOutcome> {
    cfg.validate()?;
    let train_cfg = cfg.train();
    let runtime = cfg.runtime();
    let heldout = heldout_set(cfg)?;
    let mut trainer = Trainer::new(train_cfg)?;
    let (untrained, _) = evaluate_model(&trainer.model, &runtime, &heldout, threads)?;

    let paths = out.map(|d| -> Result<(PathBuf, JsonLines)> {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        write_file(&d.join(CONFIG_FILE), cfg.to_json().as_bytes())?;
        Ok((d.to_path_buf(), JsonLines::create(&d.join(EPOCH_LOG_FILE))?))
    });
    let mut paths = paths.transpose()?;
    let mut log_text = String::new();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let spe = cfg.steps_per_epoch.max(1);
    let t0 = Instant::now();
    let mut last_eval = None;
    while !trainer.done() {
        let stage = trainer.stage();
        let log = parallel_step(&mut trainer, threads)?;
        log_text.push_str(&log.line());
        log_text.push('\n');
        steps.push(log);
        if trainer.step % spe == 0 || trainer.done() {
            let epoch = (trainer.step - 1) / spe;
            let first = epoch * spe;
            let slice = &steps[first.min(steps.len())..];
            let mean_loss = slice.iter().map(|s| s.loss).sum::<f64>() / slice.len().max(1) as f64;
            let iou = if cfg.eval_every_epoch || trainer.done() {
                let (m, _) = evaluate_model(&trainer.model, &runtime, &heldout, threads)?;
                let v = m.mean_iou;
                last_eval = Some(m);
                Some(v)
            } else {
                None
            };
            let rec = EpochRecord {
                epoch,
                step: trainer.step,
                stage: match stage {
                    ulast_core::train::Stage::Legacy => "legacy",
                    ulast_core::train::Stage::Cycle => "cycle",
                },
                mean_loss,
                heldout_mean_iou: iou,
            };
            if let Some((_, jl)) = paths.as_mut() {
                jl.write(&rec)?;
            }
            epochs.push(rec);
        }
    }
    let train_seconds = t0.elapsed().as_secs_f64();
    let trained = match last_eval {
        Some(m) => m,
        None => evaluate_model(&trainer.model, &runtime, &heldout, threads)?.0,
    };
    let metrics = RunMetrics { seed: cfg.seed, steps: trainer.step, train_seconds, untrained, trained };
    if let Some((dir, _)) = paths {
        write_file(&dir.join(TRAIN_LOG_FILE), log_text.as_bytes())?;
        let json = serde_json::to_string_pretty(&metrics).map_err(|e| Error::Parse(e.to_string()))?;
        write_file(&dir.join(METRICS_FILE), json.as_bytes())?;
        save_checkpoint(&trainer.model, trainer.step as u64, cfg.to_json(), &dir.join(CHECKPOINT_FILE))?;
    }
    Ok(RunOutcome { model: trainer.model, steps, epochs, metrics })
}
