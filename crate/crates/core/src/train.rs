//! Legacy and cycle training steps and the two-stage schedule.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cpt::{cpt_forward, CptConfig};
use crate::error::{contract_err, Error, Result};
use crate::geometry::BoxF;
use crate::loss::{base_loss, reweight, LossConfig, ReweightConfig, SampleWeight};
use crate::mask::{mask_from_single_box, region_mask, region_mask_values, GridSpec};
use crate::net::{encode, rpn_forward, AnchorGrid, Model, NetConfig, Prediction, PredictionVars};
use crate::optim::{Bound, Momentum, ParamSet};
use crate::scenes::{
    clamp_box, context_side, crop_patch, generate_sequence, sample_palindrome, CycleSample, Image, Patch, SceneSpec,
};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub scene: SceneSpec,
    pub loss: LossConfig,
    pub reweight: ReweightConfig,
    /// Applies the mask-guided sample weights.
    pub reweight_enabled: bool,
    /// Steps before sample weights apply; earlier steps use weight 1.
    pub reweight_warmup: usize,
    /// Weight of the cycle term in the stage-2 mixture.
    pub lambda_c: f64,
    /// Region-mask score threshold during training.
    pub mask_threshold: f64,
    pub detach_boxes: bool,
    pub cpt: CptConfig,
    pub batch: usize,
    pub legacy_epochs: usize,
    pub cycle_epochs: usize,
    pub steps_per_epoch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub momentum: f64,
    pub n_search: usize,
    pub gap: usize,
    pub jitter_level: f64,
    /// Legacy search-crop shift as a fraction of the patch side.
    pub aug_shift: f64,
    pub aug_scale: (f64, f64),
    /// Largest per-frame relative size change of the cycle estimate.
    pub max_scale_change: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            scene: SceneSpec { frames: 10, ..SceneSpec::default() },
            loss: LossConfig::default(),
            reweight: ReweightConfig::default(),
            reweight_enabled: true,
            reweight_warmup: 1500,
            lambda_c: 0.5,
            mask_threshold: 0.0,
            detach_boxes: false,
            cpt: CptConfig::default(),
            batch: 4,
            legacy_epochs: 30,
            cycle_epochs: 6,
            steps_per_epoch: 50,
            // the reference decay spans 20x (1e-3 to 5e-5); the small network
            // needs a larger start for the same span
            lr_start: 0.1,
            lr_end: 5e-3,
            grad_clip: 3.0,
            momentum: 0.0,
            n_search: 3,
            gap: 3,
            jitter_level: 0.2,
            aug_shift: 0.25,
            aug_scale: (0.8, 1.2),
            max_scale_change: 1.25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.scene.validate()?;
        let cfg = |m: &str| Err(Error::Config(m.into()));
        let r = &self.reweight;
        if !(r.gamma > 1.0 && r.alpha > 1.0 && r.beta_factor > 0.0 && r.beta_factor <= 1.0) {
            return cfg("need gamma > 1, alpha > 1 and 0 < beta_factor <= 1");
        }
        if !(0.0..=1.0).contains(&self.lambda_c) {
            return cfg("lambda_c must lie in [0, 1]");
        }
        if self.batch == 0 || self.n_search == 0 || self.gap == 0 {
            return cfg("batch, n_search and gap must be positive");
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return cfg("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.jitter_level) {
            return Err(Error::Range(format!("jitter level {} outside [0,1]", self.jitter_level)));
        }
        if self.scene.frames < 1 + self.n_search * self.gap {
            return cfg("scene frames too few for n_search and gap");
        }
        if !(self.aug_scale.0 > 0.0 && self.aug_scale.0 <= self.aug_scale.1) || self.aug_shift < 0.0 {
            return cfg("bad augmentation ranges");
        }
        if self.max_scale_change < 1.0 || self.grad_clip < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return cfg("need max_scale_change >= 1, grad_clip >= 0 and momentum in [0, 1)");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        (self.legacy_epochs + self.cycle_epochs) * self.steps_per_epoch
    }

    /// Learning rate decayed in log space from `lr_start` (step 0) to
    /// `lr_end` (last step).
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.total_steps();
        if total <= 1 {
            return self.lr_start;
        }
        let step = step.min(total - 1);
        if step == 0 {
            return self.lr_start;
        }
        if step == total - 1 {
            return self.lr_end;
        }
        let t = step as f64 / (total - 1) as f64;
        let (a, b) = (libm::log(self.lr_start), libm::log(self.lr_end));
        libm::exp(a + (b - a) * t)
    }

    pub fn mask_grid(&self) -> GridSpec {
        GridSpec::new(self.net.search_feat(), self.net.search_feat(), self.net.stride as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Legacy,
    Cycle,
}

/// One forward pass on a search patch.
#[derive(Debug, Clone, Copy)]
pub struct SearchPass {
    pub feature: Var,
    pub pred: PredictionVars,
    pub scores: Var,
}

pub fn search_pass(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    kernel: Var,
    patch: &Image,
    anchors: &AnchorGrid,
) -> Result<SearchPass> {
    let feature = encode(tape, bound, model, patch)?;
    let pred = rpn_forward(tape, bound, model, kernel, feature, anchors)?;
    let scores = tape.sigmoid(pred.logits);
    Ok(SearchPass { feature, pred, scores })
}

/// Template crop of `b`: context-padded square resampled to the template size.
pub fn template_patch(frame: &Image, b: &BoxF, cfg: &NetConfig) -> Patch {
    crop_patch(frame, b.center(), cfg.template_size, context_side(b.width(), b.height()))
}

/// Search crop around `center` for a target of size `w × h`.
pub fn search_patch(frame: &Image, center: (f64, f64), w: f64, h: f64, cfg: &NetConfig) -> Patch {
    let side = context_side(w, h) * cfg.search_size as f64 / cfg.template_size as f64;
    crop_patch(frame, center, cfg.search_size, side)
}

/// Index of the highest score, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Sample weight from a prediction and the label in patch coordinates.
pub fn sample_weight(pred: &Prediction, label: &BoxF, cfg: &TrainConfig) -> Result<SampleWeight> {
    let grid = cfg.mask_grid();
    let m_hat = region_mask_values(&pred.reg, &pred.cls, cfg.mask_threshold, &grid)?;
    let bounds = (cfg.net.search_size as f64, cfg.net.search_size as f64);
    let m_bar = mask_from_single_box(&clamp_box(label, bounds, 1e-3), &grid)?;
    let s_max = pred.cls.iter().cloned().fold(0.0, f64::max);
    reweight(&m_hat, &m_bar, s_max, &cfg.reweight)
}

/// Graph of one sample's loss; all handles live on the caller's tape.
#[derive(Debug, Clone)]
pub struct SampleGraph {
    pub total: Var,
    pub legacy: Var,
    pub cycle: Option<Var>,
    pub weight: SampleWeight,
    /// Weight actually applied (1 when re-weighting is off or warming up).
    pub applied_weight: f64,
    pub template_kernel: Var,
    /// Decoded boxes of each intermediate search frame, in visit order.
    pub cycle_boxes: Vec<Var>,
    /// Kernels used for each cycle prediction, starting with the template kernel.
    pub kernels: Vec<Var>,
    /// Cycle estimates in frame coordinates, in visit order.
    pub estimates: Vec<BoxF>,
}

struct LegacyPart {
    kernel: Var,
    loss: Var,
    weight: SampleWeight,
}

fn legacy_part(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    cfg: &TrainConfig,
    sample: &CycleSample,
    rng: &mut ChaCha8Rng,
) -> Result<LegacyPart> {
    let net = &cfg.net;
    let label = sample.pseudo_label.first_box;
    let tpl = template_patch(&sample.template_frame, &label, net);
    let kernel = encode(tape, bound, model, &tpl.image)?;
    let (cx, cy) = label.center();
    let base_side = context_side(label.width(), label.height()) * net.search_size as f64 / net.template_size as f64;
    let s = rng.gen_range(cfg.aug_scale.0..=cfg.aug_scale.1);
    let side = base_side * s;
    let max_shift = cfg.aug_shift * side;
    let (dx, dy) = if max_shift > 0.0 {
        (rng.gen_range(-max_shift..=max_shift), rng.gen_range(-max_shift..=max_shift))
    } else {
        (0.0, 0.0)
    };
    let patch = crop_patch(&sample.template_frame, (cx + dx, cy + dy), net.search_size, side);
    let anchors = net.anchors();
    let pass = search_pass(tape, bound, model, kernel, &patch.image, &anchors)?;
    let target = patch.to_patch(&label);
    let loss = base_loss(tape, &pass.pred, &anchors, &target, &cfg.loss)?;
    let weight = sample_weight(&pass.pred.values(tape), &target, cfg)?;
    Ok(LegacyPart { kernel, loss: loss.total, weight })
}

fn applied(cfg: &TrainConfig, w: &SampleWeight, step: usize) -> f64 {
    if cfg.reweight_enabled && step >= cfg.reweight_warmup {
        w.weight
    } else {
        1.0
    }
}

/// `w_b · L^l` for one sample: template and an augmented search crop, both
/// from the template frame.
pub fn legacy_graph(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    cfg: &TrainConfig,
    sample: &CycleSample,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<SampleGraph> {
    let part = legacy_part(tape, bound, model, cfg, sample, rng)?;
    let w = applied(cfg, &part.weight, step);
    let total = tape.scale(part.loss, w);
    Ok(SampleGraph {
        total,
        legacy: part.loss,
        cycle: None,
        weight: part.weight,
        applied_weight: w,
        template_kernel: part.kernel,
        cycle_boxes: Vec::new(),
        kernels: Vec::new(),
        estimates: Vec::new(),
    })
}

/// `w_b · ((1 − λ_c)·L^l + λ_c·L^c)`: tracks through the palindrome with
/// region masks and template propagation, then scores the return to the
/// template frame against the pseudo label.
pub fn cycle_graph(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    cfg: &TrainConfig,
    sample: &CycleSample,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<SampleGraph> {
    let net = &cfg.net;
    let part = legacy_part(tape, bound, model, cfg, sample, rng)?;
    let t1 = part.kernel;
    let anchors = net.anchors();
    let grid = cfg.mask_grid();
    let label = sample.pseudo_label.first_box;
    let (fw, fh) = (sample.template_frame.width as f64, sample.template_frame.height as f64);
    let (mut w, mut h) = (label.width(), label.height());
    let mut center = sample.search_centers.first().copied().unwrap_or(label.center());
    let mut kernel = t1;
    let mut hidden = t1;
    let mut cycle_boxes = Vec::new();
    let mut kernels = Vec::new();
    let mut estimates = Vec::new();
    for frame in &sample.search_frames {
        let patch = search_patch(frame, center, w, h, net);
        let pass = search_pass(tape, bound, model, kernel, &patch.image, &anchors)?;
        kernels.push(kernel);
        cycle_boxes.push(pass.pred.boxes);
        let (mask, _) = region_mask(tape, pass.pred.boxes, pass.scores, &grid, cfg.mask_threshold, cfg.detach_boxes)?;
        let out = cpt_forward(tape, bound, &model.cpt, &cfg.cpt, pass.feature, mask, t1, Some(hidden))?;
        kernel = out.template;
        hidden = out.hidden;
        let est = estimate_box(tape, &pass, &patch, (w, h), cfg.max_scale_change, (fw, fh));
        center = est.center();
        w = est.width();
        h = est.height();
        estimates.push(est);
    }
    let patch = search_patch(&sample.template_frame, center, w, h, net);
    let pass = search_pass(tape, bound, model, kernel, &patch.image, &anchors)?;
    kernels.push(kernel);
    let target = patch.to_patch(&label);
    let cyc = base_loss(tape, &pass.pred, &anchors, &target, &cfg.loss)?;
    let wt = applied(cfg, &part.weight, step);
    let l = tape.scale(part.loss, (1.0 - cfg.lambda_c) * wt);
    let c = tape.scale(cyc.total, cfg.lambda_c * wt);
    let total = tape.add(l, c)?;
    Ok(SampleGraph {
        total,
        legacy: part.loss,
        cycle: Some(cyc.total),
        weight: part.weight,
        applied_weight: wt,
        template_kernel: t1,
        cycle_boxes,
        kernels,
        estimates,
    })
}

/// Best-scoring box mapped back to the frame, with the size change from
/// `prev` limited to a factor of `max_change` and the center kept in frame.
fn estimate_box(
    tape: &Tape,
    pass: &SearchPass,
    patch: &Patch,
    prev: (f64, f64),
    max_change: f64,
    frame: (f64, f64),
) -> BoxF {
    let scores = tape.value(pass.scores).data();
    let k = argmax(scores);
    let b = tape.value(pass.pred.boxes).data();
    let pb = BoxF::new(b[4 * k], b[4 * k + 1], b[4 * k + 2], b[4 * k + 3]);
    let fb = patch.to_frame(&pb);
    let lim = |v: f64, p: f64| v.clamp(p / max_change, p * max_change);
    let (cx, cy) = fb.center();
    let w = lim(fb.width(), prev.0).clamp(4.0, frame.0 / 2.0);
    let h = lim(fb.height(), prev.1).clamp(4.0, frame.1 / 2.0);
    BoxF::from_center(cx.clamp(0.0, frame.0), cy.clamp(0.0, frame.1), w, h)
}

/// Per-step record for the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub l_legacy: f64,
    pub l_cycle: f64,
    pub lr: f64,
    pub w_mean: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepLog {
    /// `step loss l_legacy l_cycle lr w_mean grad_norm`.
    pub fn line(&self) -> alloc::string::String {
        format!(
            "{} {:.6} {:.6} {:.6} {:.6e} {:.4} {:.4}",
            self.step, self.loss, self.l_legacy, self.l_cycle, self.lr, self.w_mean, self.grad_norm
        )
    }
}

/// Drives the two-stage schedule one step at a time.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub step: usize,
    rng: ChaCha8Rng,
    optim: Momentum,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.net.clone(), cfg.seed)?;
        Ok(Self::with_model(cfg, model))
    }

    pub fn with_model(cfg: TrainConfig, model: Model) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7452_4149_4e00_0000);
        let optim = Momentum::new(cfg.momentum);
        Trainer { cfg, model, step: 0, rng, optim }
    }

    pub fn stage(&self) -> Stage {
        if self.step < self.cfg.legacy_epochs * self.cfg.steps_per_epoch {
            Stage::Legacy
        } else {
            Stage::Cycle
        }
    }

    pub fn done(&self) -> bool {
        self.step >= self.cfg.total_steps()
    }

    /// Draws a training sample from a fresh synthetic sequence.
    pub fn draw_sample(&mut self) -> Result<CycleSample> {
        self.draw_job().sample(&self.cfg)
    }

    fn draw_job(&mut self) -> SampleJob {
        let seq_seed = self.rng.gen();
        let label_seed = self.rng.gen();
        let aug_seed = self.rng.gen();
        SampleJob { seq_seed, label_seed, aug_seed }
    }

    /// Seeds of the next batch; advances the sampling stream.
    pub fn draw_jobs(&mut self) -> Vec<SampleJob> {
        (0..self.cfg.batch).map(|_| self.draw_job()).collect()
    }

    /// One SGD step over a fresh batch, items evaluated in order.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let jobs = self.draw_jobs();
        let (stage, step) = (self.stage(), self.step);
        let outcomes: Vec<_> = jobs.iter().map(|j| sample_gradient(&self.model, &self.cfg, stage, step, j)).collect();
        self.apply(outcomes)
    }

    /// Reduces per-item outcomes in index order and takes the optimizer step.
    /// Outcomes may come from any executor; the result only depends on their
    /// order.
    pub fn apply(&mut self, outcomes: Vec<Result<SampleOutcome>>) -> Result<StepLog> {
        let b = outcomes.len();
        if b == 0 {
            return Err(contract_err!("empty batch"));
        }
        let (mut loss, mut l_legacy, mut l_cycle, mut w_sum) = (0.0, 0.0, 0.0, 0.0);
        self.model.params.zero_grad();
        for out in outcomes {
            let out = out?;
            self.model.params.accumulate_grads(&out.grads, 1.0 / b as f64);
            loss += out.loss;
            l_legacy += out.legacy;
            l_cycle += out.cycle;
            w_sum += out.applied_weight;
        }
        let norm_sq = self.model.params.grad_norm_sq();
        if !norm_sq.is_finite() {
            return Err(Error::Training { step: self.step, detail: "non-finite gradient".into() });
        }
        if self.cfg.grad_clip > 0.0 && norm_sq > self.cfg.grad_clip * self.cfg.grad_clip {
            self.model.params.scale_grads(self.cfg.grad_clip / libm::sqrt(norm_sq));
        }
        let lr = self.cfg.lr_at(self.step);
        self.optim.step(&mut self.model.params, lr)?;
        let n = b as f64;
        let log = StepLog {
            step: self.step,
            loss: loss / n,
            l_legacy: l_legacy / n,
            l_cycle: l_cycle / n,
            lr,
            w_mean: w_sum / n,
            grad_norm: libm::sqrt(norm_sq),
        };
        self.step += 1;
        Ok(log)
    }
}

/// Seeds of one batch item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleJob {
    pub seq_seed: u64,
    pub label_seed: u64,
    pub aug_seed: u64,
}

impl SampleJob {
    pub fn sample(&self, cfg: &TrainConfig) -> Result<CycleSample> {
        let seq = generate_sequence(&cfg.scene, self.seq_seed)?;
        sample_palindrome(&seq, cfg.n_search, cfg.gap, cfg.jitter_level, self.label_seed)
    }
}

/// Loss values and parameter gradients of one batch item.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub loss: f64,
    pub legacy: f64,
    pub cycle: f64,
    pub applied_weight: f64,
    /// One slot per model parameter, in parameter-set order.
    pub grads: Vec<Option<Vec<f64>>>,
}

/// Builds, evaluates and differentiates one item's loss. Reads the model
/// only, so items may run concurrently.
pub fn sample_gradient(
    model: &Model,
    cfg: &TrainConfig,
    stage: Stage,
    step: usize,
    job: &SampleJob,
) -> Result<SampleOutcome> {
    let sample = job.sample(cfg)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(job.aug_seed);
    let g = match stage {
        Stage::Legacy => legacy_graph(&mut tape, &bound, model, cfg, &sample, &mut rng, step)?,
        Stage::Cycle => cycle_graph(&mut tape, &bound, model, cfg, &sample, &mut rng, step)?,
    };
    let loss = tape.value(g.total).item();
    if !loss.is_finite() {
        return Err(Error::Training {
            step,
            detail: format!("loss {loss} (legacy {}, weight {:?})", tape.value(g.legacy).item(), g.weight),
        });
    }
    tape.backward(g.total)?;
    Ok(SampleOutcome {
        loss,
        legacy: tape.value(g.legacy).item(),
        cycle: g.cycle.map_or(0.0, |c| tape.value(c).item()),
        applied_weight: g.applied_weight,
        grads: ParamSet::collect_grads(&tape, &bound),
    })
}
