//! Ablation studies and the template misalignment study. Each arm trains
//! from the same seeds and is scored on the same held-out set.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::{ModeKey, RunConfig};
use crate::error::{Error, Result};
use crate::formats::write_file;
use crate::parallel::map_ordered;
use crate::run::train_run;

pub const STUDIES: [&str; 6] = ["detach", "residual", "lt_st", "threshold", "reloss", "misalignment"];

/// Jitter level of the misaligned arm.
pub const MISALIGNED_JITTER: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub cfg: RunConfig,
}

/// Arms of `study` derived from `base`; every other setting is shared.
pub fn study_arms(study: &str, base: &RunConfig) -> Result<Vec<Arm>> {
    let arm = |name: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Arm { name: name.to_string(), cfg }
    };
    Ok(match study {
        "detach" => vec![arm("detach_off", &|c| c.detach_boxes = false), arm("detach_on", &|c| c.detach_boxes = true)],
        "residual" => vec![arm("residual_off", &|c| c.residual = false), arm("residual_on", &|c| c.residual = true)],
        "lt_st" => vec![
            arm("lt_st", &|c| c.cpt_mode = ModeKey::LtSt),
            arm("lt", &|c| c.cpt_mode = ModeKey::Lt),
            arm("st", &|c| c.cpt_mode = ModeKey::St),
        ],
        "threshold" => vec![
            arm("th_0", &|c| c.mask_threshold = 0.0),
            arm("th_0.5", &|c| c.mask_threshold = 0.5),
            arm("th_0.9", &|c| c.mask_threshold = 0.9),
        ],
        "reloss" => vec![arm("reloss_off", &|c| c.reweight = false), arm("reloss_on", &|c| c.reweight = true)],
        "misalignment" => vec![
            arm("clean", &|c| c.jitter_level = 0.0),
            arm("jittered", &|c| c.jitter_level = MISALIGNED_JITTER),
        ],
        other => return Err(Error::Usage(format!("unknown study {other:?}; expected one of {}", STUDIES.join(", ")))),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub arm: String,
    pub seed: u64,
    pub mean_iou: f64,
    pub success_auc: f64,
    pub precision: f64,
    pub untrained_mean_iou: f64,
    pub train_seconds: f64,
    /// Output directory of the run, relative to the report, when logged.
    pub run_dir: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub name: String,
    pub settings: RunConfig,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn rows_for(&self, arm: &str) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.arm == arm).collect()
    }

    pub fn arm_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.arm) {
                names.push(r.arm.clone());
            }
        }
        names
    }

    /// Per-run table followed by per-arm means.
    pub fn table(&self) -> String {
        let mut s = format!("study {}\n", self.name);
        let _ = writeln!(s, "{:<14} {:>6} {:>9} {:>9} {:>9}", "arm", "seed", "mean_iou", "success", "precision");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>6} {:>9.4} {:>9.4} {:>9.4}",
                r.arm, r.seed, r.mean_iou, r.success_auc, r.precision
            );
        }
        for arm in self.arm_names() {
            let rows = self.rows_for(&arm);
            let n = rows.len() as f64;
            let mean = |f: fn(&ReportRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            let _ = writeln!(
                s,
                "{:<14} {:>6} {:>9.4} {:>9.4} {:>9.4}",
                arm,
                "mean",
                mean(|r| r.mean_iou),
                mean(|r| r.success_auc),
                mean(|r| r.precision)
            );
        }
        s
    }
}

/// Trains every (arm, seed) pair, up to `threads` at a time, and collects a
/// report. With `out`, each run logs to `out/<arm>_seed<seed>/` and the
/// report is written as `report.json` and `report.txt`.
pub fn run_study(study: &str, base: &RunConfig, seeds: &[u64], out: Option<&Path>, threads: usize) -> Result<ExperimentReport> {
    if seeds.is_empty() {
        return Err(Error::Usage("a study needs at least one seed".into()));
    }
    let arms = study_arms(study, base)?;
    for a in &arms {
        a.cfg.validate()?;
    }
    let jobs: Vec<(Arm, u64)> = arms.iter().flat_map(|a| seeds.iter().map(move |&s| (a.clone(), s))).collect();
    // outer parallelism over runs; each run stays single-threaded
    let results = map_ordered(&jobs, threads, |(arm, seed)| -> Result<ReportRow> {
        let cfg = RunConfig { seed: *seed, ..arm.cfg.clone() };
        let dir_name = format!("{}_seed{}", arm.name, seed);
        let dir = out.map(|d| d.join(&dir_name));
        let run = train_run(&cfg, dir.as_deref(), 1)?;
        let m = &run.metrics;
        Ok(ReportRow {
            arm: arm.name.clone(),
            seed: *seed,
            mean_iou: m.trained.mean_iou,
            success_auc: m.trained.success_auc,
            precision: m.trained.precision,
            untrained_mean_iou: m.untrained.mean_iou,
            train_seconds: m.train_seconds,
            run_dir: dir.map(|_| dir_name),
        })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let report = ExperimentReport { name: study.to_string(), settings: base.clone(), seeds: seeds.to_vec(), rows };
    if let Some(d) = out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(e.to_string()))?;
        write_file(&d.join("report.json"), json.as_bytes())?;
        write_file(&d.join("report.txt"), report.table().as_bytes())?;
    }
    Ok(report)
}

/// Clean templates against jitter level 1.0, on every seed.
pub fn run_misalignment_study(base: &RunConfig, seeds: &[u64], out: Option<&Path>, threads: usize) -> Result<ExperimentReport> {
    run_study("misalignment", base, seeds, out, threads)
}

pub fn run_ablations(study: &str, base: &RunConfig, seeds: &[u64], out: Option<&Path>, threads: usize) -> Result<ExperimentReport> {
    if study == "misalignment" {
        return Err(Error::Usage("misalignment is not an ablation; use run_misalignment_study".into()));
    }
    run_study(study, base, seeds, out, threads)
}
