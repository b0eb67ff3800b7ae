//! Flat JSON run configuration. Every key is optional; unknown keys are
//! rejected before any work starts.

use std::path::Path;

use serde::{Deserialize, Serialize};
use ulast_core::cpt::{AttentionAxis, CptConfig, CptMode};
use ulast_core::loss::{LossConfig, ReweightConfig};
use ulast_core::net::NetConfig;
use ulast_core::runtime::RuntimeConfig;
use ulast_core::scenes::SceneSpec;
use ulast_core::train::TrainConfig;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKey {
    LtSt,
    Lt,
    St,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisKey {
    Search,
    Template,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // schedule
    pub batch: usize,
    pub legacy_epochs: usize,
    pub cycle_epochs: usize,
    pub steps_per_epoch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub grad_clip: f64,
    pub momentum: f64,

    // losses
    pub lambda_c: f64,
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub atss_topk: usize,
    pub reweight: bool,
    pub reweight_gamma: f64,
    pub reweight_alpha: f64,
    pub reweight_beta_factor: f64,
    /// Steps before sample weights apply; absent means the legacy stage length.
    pub reweight_warmup: Option<usize>,

    // region mask and template transform
    pub mask_threshold: f64,
    pub detach_boxes: bool,
    pub cpt_mode: ModeKey,
    pub attention_axis: AxisKey,
    pub residual: bool,

    // cycle sampling
    pub n_search: usize,
    pub gap: usize,
    pub jitter_level: f64,
    pub aug_shift: f64,
    pub aug_scale_min: f64,
    pub aug_scale_max: f64,
    pub cycle_max_scale_change: f64,

    // network
    pub channels: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub anchor_scale: f64,
    pub ratios: Vec<f64>,

    // synthetic scenes
    pub width: usize,
    pub height: usize,
    pub train_frames: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub max_speed: f64,
    pub max_scale_step: f64,
    pub n_distractors: usize,
    pub noise: f64,

    // online tracking
    pub lambda_m: f64,
    pub memory: bool,
    pub queue_capacity: usize,
    pub refresh_interval: usize,
    pub window_weight: f64,
    pub online_threshold: f64,
    pub track_max_scale_change: f64,
    pub size_lr: f64,

    // held-out evaluation
    pub eval_sequences: usize,
    pub eval_frames: usize,
    pub eval_seed: u64,
    /// Evaluate the held-out set after every epoch.
    pub eval_every_epoch: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_parts(&TrainConfig::default(), &RuntimeConfig::default())
    }
}

impl RunConfig {
    fn from_parts(t: &TrainConfig, r: &RuntimeConfig) -> Self {
        RunConfig {
            seed: t.seed,
            batch: t.batch,
            legacy_epochs: t.legacy_epochs,
            cycle_epochs: t.cycle_epochs,
            steps_per_epoch: t.steps_per_epoch,
            lr_start: t.lr_start,
            lr_end: t.lr_end,
            grad_clip: t.grad_clip,
            momentum: t.momentum,
            lambda_c: t.lambda_c,
            lambda_cls: t.loss.lambda_cls,
            lambda_reg: t.loss.lambda_reg,
            focal_gamma: t.loss.focal_gamma,
            focal_alpha: t.loss.focal_alpha,
            atss_topk: t.loss.atss_topk,
            reweight: t.reweight_enabled,
            reweight_gamma: t.reweight.gamma,
            reweight_alpha: t.reweight.alpha,
            reweight_beta_factor: t.reweight.beta_factor,
            reweight_warmup: None,
            mask_threshold: t.mask_threshold,
            detach_boxes: t.detach_boxes,
            cpt_mode: match t.cpt.mode {
                CptMode::LongShort => ModeKey::LtSt,
                CptMode::LongOnly => ModeKey::Lt,
                CptMode::ShortOnly => ModeKey::St,
            },
            attention_axis: match t.cpt.axis {
                AttentionAxis::Search => AxisKey::Search,
                AttentionAxis::Template => AxisKey::Template,
            },
            residual: t.cpt.residual,
            n_search: t.n_search,
            gap: t.gap,
            jitter_level: t.jitter_level,
            aug_shift: t.aug_shift,
            aug_scale_min: t.aug_scale.0,
            aug_scale_max: t.aug_scale.1,
            cycle_max_scale_change: t.max_scale_change,
            channels: t.net.channels,
            template_size: t.net.template_size,
            search_size: t.net.search_size,
            anchor_scale: t.net.anchor_scale,
            ratios: t.net.ratios.clone(),
            width: t.scene.width,
            height: t.scene.height,
            train_frames: t.scene.frames,
            min_size: t.scene.min_size,
            max_size: t.scene.max_size,
            max_speed: t.scene.max_speed,
            max_scale_step: t.scene.max_scale_step,
            n_distractors: t.scene.n_distractors,
            noise: t.scene.noise,
            lambda_m: r.lambda_m,
            memory: r.memory,
            queue_capacity: r.capacity,
            refresh_interval: r.refresh_interval,
            window_weight: r.window_weight,
            online_threshold: r.online_threshold,
            track_max_scale_change: r.max_scale_change,
            size_lr: r.size_lr,
            eval_sequences: 16,
            eval_frames: 24,
            eval_seed: 1_000_000,
            eval_every_epoch: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn cpt(&self) -> CptConfig {
        CptConfig {
            mode: match self.cpt_mode {
                ModeKey::LtSt => CptMode::LongShort,
                ModeKey::Lt => CptMode::LongOnly,
                ModeKey::St => CptMode::ShortOnly,
            },
            axis: match self.attention_axis {
                AxisKey::Search => AttentionAxis::Search,
                AxisKey::Template => AttentionAxis::Template,
            },
            residual: self.residual,
        }
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            channels: self.channels,
            template_size: self.template_size,
            search_size: self.search_size,
            anchor_scale: self.anchor_scale,
            ratios: self.ratios.clone(),
            ..NetConfig::default()
        }
    }

    pub fn scene(&self, frames: usize) -> SceneSpec {
        SceneSpec {
            width: self.width,
            height: self.height,
            frames,
            min_size: self.min_size,
            max_size: self.max_size,
            max_speed: self.max_speed,
            max_scale_step: self.max_scale_step,
            n_distractors: self.n_distractors,
            noise: self.noise,
        }
    }

    pub fn eval_scene(&self) -> SceneSpec {
        self.scene(self.eval_frames)
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            net: self.net(),
            scene: self.scene(self.train_frames),
            loss: LossConfig {
                lambda_cls: self.lambda_cls,
                lambda_reg: self.lambda_reg,
                focal_gamma: self.focal_gamma,
                focal_alpha: self.focal_alpha,
                atss_topk: self.atss_topk,
            },
            reweight: ReweightConfig {
                gamma: self.reweight_gamma,
                alpha: self.reweight_alpha,
                beta_factor: self.reweight_beta_factor,
            },
            reweight_enabled: self.reweight,
            reweight_warmup: self.reweight_warmup.unwrap_or(self.legacy_epochs * self.steps_per_epoch),
            lambda_c: self.lambda_c,
            mask_threshold: self.mask_threshold,
            detach_boxes: self.detach_boxes,
            cpt: self.cpt(),
            batch: self.batch,
            legacy_epochs: self.legacy_epochs,
            cycle_epochs: self.cycle_epochs,
            steps_per_epoch: self.steps_per_epoch,
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            grad_clip: self.grad_clip,
            momentum: self.momentum,
            n_search: self.n_search,
            gap: self.gap,
            jitter_level: self.jitter_level,
            aug_shift: self.aug_shift,
            aug_scale: (self.aug_scale_min, self.aug_scale_max),
            max_scale_change: self.cycle_max_scale_change,
            seed: self.seed,
        }
    }

    pub fn runtime(&self) -> RuntimeConfig {
        RuntimeConfig {
            lambda_m: self.lambda_m,
            memory: self.memory,
            capacity: self.queue_capacity,
            refresh_interval: self.refresh_interval,
            window_weight: self.window_weight,
            online_threshold: self.online_threshold,
            max_scale_change: self.track_max_scale_change,
            size_lr: self.size_lr,
            cpt: self.cpt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train().validate()?;
        self.runtime().validate()?;
        self.eval_scene().validate()?;
        if self.eval_sequences == 0 || self.eval_frames < 2 {
            return Err(Error::Config("need at least one held-out sequence of two or more frames".into()));
        }
        Ok(())
    }
}
