//! `ulast <command> [--config c.json] [--out dir] [--seed n] ...`

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ulast_core::net::Model;
use ulast_core::scenes::generate_sequence;

use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, heldout_set};
use crate::experiment::{run_ablations, run_misalignment_study, STUDIES};
use crate::formats::{encode_ppm, format_boxes, write_file};
use crate::gradcheck::all_suites;
use crate::parallel::threads;
use crate::run::{train_run, CHECKPOINT_FILE, METRICS_FILE};

#[derive(Debug, Parser)]
#[command(name = "ulast", about = "Unsupervised Siamese tracker on synthetic scenes", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write held-out sequences as PPM frames plus ground-truth boxes.
    GenData(Common),
    /// Train from scratch; writes checkpoint, step log, epoch log and metrics.
    Train(Common),
    /// Track one generated sequence and write the predicted boxes.
    Track(ModelArgs),
    /// Score a model on the held-out set.
    Eval(ModelArgs),
    /// Check tape gradients against finite differences.
    Gradcheck(Common),
    /// Run an ablation or the misalignment study over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply to absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to load; without it the model is freshly initialized.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub study: String,
    /// Number of consecutive seeds starting at the configured seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<Option<&Path>> {
        if let Some(d) = &self.out {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(self.out.as_deref())
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Parse(e.to_string()))
}

fn model_for(args: &ModelArgs, cfg: &RunConfig) -> Result<Model> {
    let mut model = Model::new(cfg.net(), cfg.seed)?;
    if let Some(p) = &args.checkpoint {
        load_checkpoint(&mut model, p)?;
    }
    Ok(model)
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = c.load()?;
    let out = c.out_dir()?.ok_or_else(|| Error::Usage("gen-data needs --out".into()))?;
    for seq in heldout_set(&cfg)? {
        let dir = out.join(&seq.seq_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, f) in seq.frames.iter().enumerate() {
            write_file(&dir.join(format!("{i:04}.ppm")), &encode_ppm(f)?)?;
        }
        write_file(&dir.join("groundtruth.txt"), format_boxes(&seq.gt_boxes).as_bytes())?;
    }
    println!("wrote {} sequences to {}", cfg.eval_sequences, out.display());
    Ok(())
}

fn train(c: &Common) -> Result<()> {
    let cfg = c.load()?;
    let out = c.out_dir()?;
    let r = train_run(&cfg, out, threads())?;
    for e in &r.epochs {
        match e.heldout_mean_iou {
            Some(v) => println!("epoch {:>3} {:<6} loss {:.4} heldout iou {:.3}", e.epoch, e.stage, e.mean_loss, v),
            None => println!("epoch {:>3} {:<6} loss {:.4}", e.epoch, e.stage, e.mean_loss),
        }
    }
    println!(
        "untrained iou {:.3}, trained iou {:.3}, {:.1}s",
        r.metrics.untrained.mean_iou, r.metrics.trained.mean_iou, r.metrics.train_seconds
    );
    if let Some(d) = out {
        println!("checkpoint {}", d.join(CHECKPOINT_FILE).display());
    }
    Ok(())
}

fn track(a: &ModelArgs) -> Result<()> {
    let cfg = a.common.load()?;
    let model = model_for(a, &cfg)?;
    let seq = generate_sequence(&cfg.eval_scene(), cfg.seed)?;
    let (summary, tracks) = evaluate_model(&model, &cfg.runtime(), std::slice::from_ref(&seq), 1)?;
    let boxes: Vec<_> = tracks[0].iter().map(|r| r.b).collect();
    let text = format_boxes(&boxes);
    match a.common.out_dir()? {
        Some(d) => {
            write_file(&d.join("boxes.txt"), text.as_bytes())?;
            write_file(&d.join("groundtruth.txt"), format_boxes(&seq.gt_boxes).as_bytes())?;
            write_file(&d.join(METRICS_FILE), to_json(&summary)?.as_bytes())?;
        }
        None => print!("{text}"),
    }
    println!("{} mean iou {:.3}", seq.seq_id, summary.mean_iou);
    Ok(())
}

fn eval(a: &ModelArgs) -> Result<()> {
    let cfg = a.common.load()?;
    let model = model_for(a, &cfg)?;
    let (summary, _) = evaluate_model(&model, &cfg.runtime(), &heldout_set(&cfg)?, threads())?;
    if let Some(d) = a.common.out_dir()? {
        write_file(&d.join(METRICS_FILE), to_json(&summary)?.as_bytes())?;
    }
    println!(
        "{} sequences: mean iou {:.3}, success auc {:.3}, precision {:.3}",
        summary.sequences.len(),
        summary.mean_iou,
        summary.success_auc,
        summary.precision
    );
    Ok(())
}

/// Exit status 0 iff every suite passes.
fn gradcheck(c: &Common) -> Result<bool> {
    let cfg = c.load()?;
    let suites = all_suites(cfg.seed)?;
    let mut text = String::new();
    for s in &suites {
        text.push_str(&s.line());
        text.push('\n');
    }
    print!("{text}");
    if let Some(d) = c.out_dir()? {
        write_file(&d.join("gradcheck.txt"), text.as_bytes())?;
    }
    Ok(suites.iter().all(|s| s.passed()))
}

fn ablate(a: &AblateArgs) -> Result<()> {
    if !STUDIES.contains(&a.study.as_str()) {
        return Err(Error::Usage(format!("unknown study {:?}; expected one of {}", a.study, STUDIES.join(", "))));
    }
    if a.seeds == 0 {
        return Err(Error::Usage("--seeds must be positive".into()));
    }
    let cfg = a.common.load()?;
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + a.seeds).collect();
    let out = a.common.out_dir()?;
    let report = if a.study == "misalignment" {
        run_misalignment_study(&cfg, &seeds, out, threads())?
    } else {
        run_ablations(&a.study, &cfg, &seeds, out, threads())?
    };
    print!("{}", report.table());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::GenData(c) => gen_data(c).map(|_| true),
        Command::Train(c) => train(c).map(|_| true),
        Command::Track(a) => track(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Gradcheck(c) => gradcheck(c),
        Command::Ablate(a) => ablate(a).map(|_| true),
    }
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
