//! Online tracking with a memory queue, and sequence metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::cpt::{cpt_forward, CptConfig};
use crate::error::{contract_err, Error, Result};
use crate::geometry::BoxF;
use crate::mask::{mask_from_single_box, region_mask_values, GridSpec};
use crate::net::{encode, rpn_forward, Model, Prediction};
use crate::scenes::{clamp_box, Image, Patch};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{argmax, search_patch, template_patch};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuntimeConfig {
    /// Weight of the memory-kernel score map.
    pub lambda_m: f64,
    /// Disables the memory branch entirely when false.
    pub memory: bool,
    /// Queue capacity including the pinned initial entry.
    pub capacity: usize,
    /// Frames between hidden-template and memory refreshes.
    pub refresh_interval: usize,
    /// Blend weight of the cosine window; 0 disables it.
    pub window_weight: f64,
    /// Online mask threshold as a fraction of the best score.
    pub online_threshold: f64,
    /// Largest per-frame relative size change.
    pub max_scale_change: f64,
    /// Step toward the regressed size per frame; 1 adopts it outright.
    pub size_lr: f64,
    pub cpt: CptConfig,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            lambda_m: 0.3,
            memory: true,
            capacity: 6,
            refresh_interval: 10,
            window_weight: 0.15,
            online_threshold: 0.5,
            max_scale_change: 1.1,
            size_lr: 0.15,
            cpt: CptConfig::default(),
        }
    }
}

impl RuntimeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(0.0..=1.0).contains(&self.lambda_m) || !(0.0..=1.0).contains(&self.window_weight) {
            return bad("lambda_m and window_weight must lie in [0, 1]");
        }
        if self.capacity == 0 {
            return bad("memory queue capacity must be positive");
        }
        if !(0.0..=1.0).contains(&self.online_threshold) {
            return bad("online_threshold must lie in [0, 1]");
        }
        if self.max_scale_change < 1.0 || !(self.size_lr > 0.0 && self.size_lr <= 1.0) {
            return bad("need max_scale_change >= 1 and size_lr in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub feature: Tensor,
    pub mask: Tensor,
    pub score: f64,
    pub frame: usize,
}

/// Fixed-capacity store; entry 0 is the initial frame and is never evicted.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryQueue {
    capacity: usize,
    entries: Vec<MemoryEntry>,
}

impl MemoryQueue {
    pub fn new(capacity: usize, initial: MemoryEntry) -> Result<Self> {
        if capacity == 0 {
            return Err(contract_err!("memory queue capacity must be positive"));
        }
        Ok(MemoryQueue { capacity, entries: vec![initial] })
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Non-pinned entry to evict: lowest score, newest on ties.
    fn weakest(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for i in 1..self.entries.len() {
            let e = &self.entries[i];
            match best {
                None => best = Some(i),
                Some(b) => {
                    let cur = &self.entries[b];
                    if e.score < cur.score || (e.score == cur.score && e.frame > cur.frame) {
                        best = Some(i);
                    }
                }
            }
        }
        best
    }

    /// Inserts when there is room or `entry` beats the weakest non-pinned
    /// entry, which is then evicted. Returns whether the queue changed.
    pub fn offer(&mut self, entry: MemoryEntry) -> bool {
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
            return true;
        }
        match self.weakest() {
            Some(i) if entry.score > self.entries[i].score => {
                self.entries[i] = entry;
                true
            }
            _ => false,
        }
    }
}

/// Per-sequence tracking state.
#[derive(Debug, Clone)]
pub struct TrackerState {
    pub template: Tensor,
    pub legacy_kernel: Tensor,
    pub memory_kernel: Tensor,
    pub hidden: Tensor,
    pub last_box: BoxF,
    pub last_score: f64,
    pub frame: usize,
    pub queue: MemoryQueue,
    pub interval_best: Option<MemoryEntry>,
    /// Fused score maps are kept for inspection when set.
    pub keep_maps: bool,
    pub last_maps: Option<ScoreMaps>,
    frame_size: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMaps {
    pub legacy: Vec<f64>,
    pub memory: Vec<f64>,
    pub fused: Vec<f64>,
}

/// `(1 − λ)·legacy + λ·memory`, exact at the endpoints.
pub fn fuse_scores(legacy: &[f64], memory: &[f64], lambda: f64) -> Vec<f64> {
    if lambda == 0.0 {
        return legacy.to_vec();
    }
    if lambda == 1.0 {
        return memory.to_vec();
    }
    legacy.iter().zip(memory).map(|(l, m)| (1.0 - lambda) * l + lambda * m).collect()
}

/// Outer product of Hann windows over an `n × n` grid, repeated per ratio.
pub fn cosine_window(n: usize, ratios: usize) -> Vec<f64> {
    let hann: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * libm::cos(2.0 * core::f64::consts::PI * (i as f64 + 1.0) / (n as f64 + 1.0)))
        .collect();
    let mut out = Vec::with_capacity(n * n * ratios);
    for _ in 0..ratios {
        for i in 0..n {
            for j in 0..n {
                out.push(hann[i] * hann[j]);
            }
        }
    }
    out
}

fn grid_of(model: &Model) -> GridSpec {
    let n = model.cfg.search_feat();
    GridSpec::new(n, n, model.cfg.stride as f64)
}

struct Forward {
    feature: Tensor,
    pred: Prediction,
    memory_cls: Option<Vec<f64>>,
}

fn forward(model: &Model, patch: &Image, legacy: &Tensor, memory: Option<&Tensor>) -> Result<Forward> {
    let anchors = model.cfg.anchors();
    let mut t = Tape::new();
    let b = model.bind_frozen(&mut t);
    let s = encode(&mut t, &b, model, patch)?;
    let k = t.constant(legacy.clone());
    let p = rpn_forward(&mut t, &b, model, k, s, &anchors)?;
    let memory_cls = match memory {
        Some(m) => {
            let mk = t.constant(m.clone());
            let pm = rpn_forward(&mut t, &b, model, mk, s, &anchors)?;
            Some(pm.values(&t).cls)
        }
        None => None,
    };
    Ok(Forward { feature: t.value(s).clone(), pred: p.values(&t), memory_cls })
}

/// Mean over queue entries of the propagated template.
fn memory_kernel(
    model: &Model,
    cfg: &RuntimeConfig,
    queue: &MemoryQueue,
    t1: &Tensor,
    hidden: &Tensor,
) -> Result<Tensor> {
    let mut acc = vec![0.0; t1.len()];
    for e in queue.entries() {
        let mut t = Tape::new();
        let b = model.bind_frozen(&mut t);
        let (s, m, tv, hv) = (
            t.constant(e.feature.clone()),
            t.constant(e.mask.clone()),
            t.constant(t1.clone()),
            t.constant(hidden.clone()),
        );
        let out = cpt_forward(&mut t, &b, &model.cpt, &cfg.cpt, s, m, tv, Some(hv))?;
        for (a, v) in acc.iter_mut().zip(t.value(out.template).data()) {
            *a += v;
        }
    }
    let n = queue.len() as f64;
    Tensor::new(t1.shape(), acc.into_iter().map(|v| v / n).collect())
}

fn refresh_hidden(model: &Model, cfg: &RuntimeConfig, e: &MemoryEntry, t1: &Tensor, hidden: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new();
    let b = model.bind_frozen(&mut t);
    let (s, m, tv, hv) =
        (t.constant(e.feature.clone()), t.constant(e.mask.clone()), t.constant(t1.clone()), t.constant(hidden.clone()));
    let out = cpt_forward(&mut t, &b, &model.cpt, &cfg.cpt, s, m, tv, Some(hv))?;
    Ok(t.value(out.hidden).clone())
}

pub fn init(model: &Model, cfg: &RuntimeConfig, frame: &Image, b: &BoxF) -> Result<TrackerState> {
    cfg.validate()?;
    let (fw, fh) = (frame.width as f64, frame.height as f64);
    if !b.is_valid() || b.x2 <= 0.0 || b.y2 <= 0.0 || b.x1 >= fw || b.y1 >= fh {
        return Err(contract_err!("initial box {:?} is degenerate or outside the frame", b));
    }
    let tpl = template_patch(frame, b, &model.cfg);
    let mut t = Tape::new();
    let bound = model.bind_frozen(&mut t);
    let kv = encode(&mut t, &bound, model, &tpl.image)?;
    let template = t.value(kv).clone();
    let patch = search_patch(frame, b.center(), b.width(), b.height(), &model.cfg);
    let sv = encode(&mut t, &bound, model, &patch.image)?;
    let s = model.cfg.search_size as f64;
    let mask = mask_from_single_box(&clamp_box(&patch.to_patch(b), (s, s), 1e-3), &grid_of(model))?;
    let entry = MemoryEntry { feature: t.value(sv).clone(), mask: mask.grid, score: 1.0, frame: 0 };
    let queue = MemoryQueue::new(cfg.capacity, entry)?;
    let hidden = template.clone();
    let memory_kernel = memory_kernel(model, cfg, &queue, &template, &hidden)?;
    Ok(TrackerState {
        legacy_kernel: template.clone(),
        template,
        memory_kernel,
        hidden,
        last_box: *b,
        last_score: 1.0,
        frame: 0,
        queue,
        interval_best: None,
        keep_maps: false,
        last_maps: None,
        frame_size: (fw, fh),
    })
}

/// Tracks one frame; returns the box in frame coordinates and its score.
pub fn track_frame(model: &Model, cfg: &RuntimeConfig, state: &mut TrackerState, frame: &Image) -> Result<(BoxF, f64)> {
    let prev = state.last_box;
    let patch: Patch = search_patch(frame, prev.center(), prev.width(), prev.height(), &model.cfg);
    let use_memory = cfg.memory && cfg.lambda_m > 0.0;
    let fw = forward(model, &patch.image, &state.legacy_kernel, use_memory.then_some(&state.memory_kernel))?;
    let legacy = &fw.pred.cls;
    let fused = match &fw.memory_cls {
        Some(m) => fuse_scores(legacy, m, cfg.lambda_m),
        None => legacy.clone(),
    };
    let selection: Vec<f64> = if cfg.window_weight > 0.0 {
        let n = model.cfg.response_size();
        let win = cosine_window(n, model.cfg.ratios.len());
        fused.iter().zip(&win).map(|(s, w)| (1.0 - cfg.window_weight) * s + cfg.window_weight * w).collect()
    } else {
        fused.clone()
    };
    let k = argmax(&selection);
    let score = fused[k];
    let fb = patch.to_frame(&fw.pred.reg[k]);
    let lim = |v: f64, p: f64| {
        let v = p + cfg.size_lr * (v - p);
        v.clamp(p / cfg.max_scale_change, p * cfg.max_scale_change)
    };
    let (cx, cy) = fb.center();
    let (w, h) = (lim(fb.width(), prev.width()), lim(fb.height(), prev.height()));
    let (fwid, fhei) = state.frame_size;
    let b = BoxF::from_center(cx.clamp(0.0, fwid), cy.clamp(0.0, fhei), w.clamp(4.0, fwid), h.clamp(4.0, fhei));
    let b = clamp_box(&b, state.frame_size, 1.0);
    state.frame += 1;
    state.last_box = b;
    state.last_score = score;
    if state.keep_maps {
        state.last_maps = Some(ScoreMaps {
            legacy: legacy.clone(),
            memory: fw.memory_cls.clone().unwrap_or_default(),
            fused: fused.clone(),
        });
    }
    if cfg.memory {
        let s_max = fused.iter().cloned().fold(0.0, f64::max);
        let mask = region_mask_values(&fw.pred.reg, &fused, cfg.online_threshold * s_max, &grid_of(model))?;
        let cand = MemoryEntry { feature: fw.feature, mask: mask.grid, score, frame: state.frame };
        if state.interval_best.as_ref().map_or(true, |b| score > b.score) {
            state.interval_best = Some(cand);
        }
        if cfg.refresh_interval > 0 && state.frame % cfg.refresh_interval == 0 {
            update_memory(model, cfg, state)?;
        }
    }
    Ok((b, score))
}

/// Offers the interval's best frame to the queue, refreshes the hidden
/// template from it and rebuilds the memory kernel.
pub fn update_memory(model: &Model, cfg: &RuntimeConfig, state: &mut TrackerState) -> Result<()> {
    let Some(best) = state.interval_best.take() else {
        return Ok(());
    };
    state.hidden = refresh_hidden(model, cfg, &best, &state.template, &state.hidden)?;
    state.queue.offer(best);
    state.memory_kernel = memory_kernel(model, cfg, &state.queue, &state.template, &state.hidden)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackResult {
    pub frame: usize,
    pub b: BoxF,
    pub score: f64,
}

/// Tracks every frame after the first, starting from `init_box`.
pub fn track_sequence(
    model: &Model,
    cfg: &RuntimeConfig,
    frames: &[Image],
    init_box: &BoxF,
) -> Result<Vec<TrackResult>> {
    let first = frames.first().ok_or_else(|| contract_err!("empty sequence"))?;
    let mut state = init(model, cfg, first, init_box)?;
    let mut out = vec![TrackResult { frame: 0, b: *init_box, score: 1.0 }];
    for (i, f) in frames.iter().enumerate().skip(1) {
        let (b, score) = track_frame(model, cfg, &mut state, f)?;
        out.push(TrackResult { frame: i, b, score });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mean_iou: f64,
    pub success_auc: f64,
    pub precision: f64,
}

/// Center-error radius for the precision score, in pixels.
pub const PRECISION_RADIUS: f64 = 5.0;

/// Success counts a frame at threshold `t` when its IoU is positive and
/// at least `t`, over `t = 0, 0.05, …, 1`.
pub fn evaluate(results: &[BoxF], gt: &[BoxF]) -> Result<Metrics> {
    if results.is_empty() || results.len() != gt.len() {
        return Err(contract_err!("evaluate: {} results for {} ground-truth boxes", results.len(), gt.len()));
    }
    let n = results.len() as f64;
    let ious: Vec<f64> = results.iter().zip(gt).map(|(r, g)| r.iou(g)).collect();
    let mean_iou = ious.iter().sum::<f64>() / n;
    let mut auc = 0.0;
    for t in 0..=20 {
        let thr = t as f64 * 0.05;
        auc += ious.iter().filter(|&&v| v > 0.0 && v >= thr).count() as f64 / n;
    }
    let success_auc = auc / 21.0;
    let precision = results.iter().zip(gt).filter(|(r, g)| r.center_distance(g) <= PRECISION_RADIUS).count() as f64 / n;
    Ok(Metrics { mean_iou, success_auc, precision })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use crate::scenes::{generate_sequence, SceneSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(score: f64, frame: usize) -> MemoryEntry {
        MemoryEntry { feature: Tensor::zeros(&[1]), mask: Tensor::zeros(&[1]), score, frame }
    }

    #[test]
    fn queue_fill_and_evict() {
        let mut q = MemoryQueue::new(3, entry(1.0, 0)).unwrap();
        assert_eq!(q.len(), 1);
        assert!(q.offer(entry(0.2, 1)));
        assert!(q.offer(entry(0.5, 2)));
        assert!(!q.offer(entry(0.1, 3)));
        assert_eq!(q.len(), 3);
        let before = q.clone();
        assert!(!q.offer(entry(0.2, 4)));
        assert_eq!(q, before);
        assert!(q.offer(entry(0.9, 5)));
        assert_eq!(q.entries()[0].frame, 0);
        let frames: Vec<usize> = q.entries().iter().map(|e| e.frame).collect();
        assert_eq!(frames, [0, 5, 2]);
    }

    #[test]
    fn queue_stress() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut q = MemoryQueue::new(6, entry(0.01, 0)).unwrap();
        let mut seen: Vec<(f64, usize)> = Vec::new();
        for f in 1..=1000 {
            let s = (rng.gen_range(0.0..1.0f64) * 20.0).round() / 20.0;
            q.offer(entry(s, f));
            seen.push((s, f));
            assert!(q.len() <= 6);
            assert_eq!(q.entries()[0].frame, 0);
            // the kept entries are the top scores seen, older first on ties
            let mut expect = seen.clone();
            expect.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut want: Vec<usize> = expect.iter().take(5).map(|e| e.1).collect();
            want.sort();
            let mut got: Vec<usize> = q.entries()[1..].iter().map(|e| e.frame).collect();
            got.sort();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn fusion_endpoints_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l: Vec<f64> = (0..405).map(|_| rng.gen_range(0.0..1.0)).collect();
        let m: Vec<f64> = (0..405).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert_eq!(fuse_scores(&l, &m, 0.0), l);
        assert_eq!(fuse_scores(&l, &m, 1.0), m);
        for (i, f) in fuse_scores(&l, &m, 0.3).iter().enumerate() {
            assert!((f - (0.7 * l[i] + 0.3 * m[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn metrics_closed_forms() {
        let gt = [BoxF::new(0.0, 0.0, 10.0, 10.0), BoxF::new(5.0, 5.0, 25.0, 15.0)];
        let m = evaluate(&gt, &gt).unwrap();
        assert_eq!((m.mean_iou, m.success_auc, m.precision), (1.0, 1.0, 1.0));
        let a = [BoxF::new(0.0, 0.0, 1.0, 1.0)];
        let b = [BoxF::new(0.5, 0.0, 1.5, 1.0)];
        assert!((evaluate(&a, &b).unwrap().mean_iou - 1.0 / 3.0).abs() < 1e-15);
        assert!(evaluate(&a, &gt).is_err());
        assert!(evaluate(&[], &[]).is_err());
    }

    #[test]
    fn iou_matches_pixel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut r = || {
                let x = rng.gen_range(0..30) as f64;
                let y = rng.gen_range(0..30) as f64;
                BoxF::new(x, y, x + rng.gen_range(1..15) as f64, y + rng.gen_range(1..15) as f64)
            };
            let (a, b) = (r(), r());
            let (mut inter, mut uni) = (0usize, 0usize);
            for y in 0..50 {
                for x in 0..50 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let ia = a.contains_point(px, py);
                    let ib = b.contains_point(px, py);
                    inter += (ia && ib) as usize;
                    uni += (ia || ib) as usize;
                }
            }
            let oracle = inter as f64 / uni as f64;
            assert!((evaluate(&[a], &[b]).unwrap().mean_iou - oracle).abs() <= 1e-9);
        }
    }

    #[test]
    fn tracker_runs_and_keeps_invariants() {
        let model = Model::new(NetConfig::default(), 5).unwrap();
        let spec = SceneSpec { frames: 25, ..SceneSpec::default() };
        let seq = generate_sequence(&spec, 7).unwrap();
        let cfg = RuntimeConfig { refresh_interval: 4, ..RuntimeConfig::default() };
        let mut st = init(&model, &cfg, &seq.frames[0], &seq.gt_boxes[0]).unwrap();
        assert_eq!(st.queue.len(), 1);
        assert_eq!(st.memory_kernel.shape(), &[16, 8, 8]);
        for f in &seq.frames[1..] {
            let (b, s) = track_frame(&model, &cfg, &mut st, f).unwrap();
            assert!(b.is_valid() && (0.0..=1.0).contains(&s));
            assert!(st.queue.len() <= cfg.capacity);
            assert_eq!(st.queue.entries()[0].frame, 0);
        }
        assert_eq!(st.queue.len(), cfg.capacity);
        let again = track_sequence(&model, &cfg, &seq.frames, &seq.gt_boxes[0]).unwrap();
        let twice = track_sequence(&model, &cfg, &seq.frames, &seq.gt_boxes[0]).unwrap();
        assert_eq!(again, twice);
        assert!(init(&model, &cfg, &seq.frames[0], &BoxF::new(3.0, 3.0, 3.0, 9.0)).is_err());
    }

    #[test]
    fn offline_mode_uses_legacy_map_only() {
        let model = Model::new(NetConfig::default(), 6).unwrap();
        let seq = generate_sequence(&SceneSpec { frames: 4, ..SceneSpec::default() }, 8).unwrap();
        for (lambda, memory) in [(0.0, true), (0.5, false)] {
            let cfg = RuntimeConfig { lambda_m: lambda, memory, ..RuntimeConfig::default() };
            let mut st = init(&model, &cfg, &seq.frames[0], &seq.gt_boxes[0]).unwrap();
            st.keep_maps = true;
            track_frame(&model, &cfg, &mut st, &seq.frames[1]).unwrap();
            let maps = st.last_maps.unwrap();
            assert_eq!(maps.fused, maps.legacy);
            assert!(maps.memory.is_empty());
        }
    }
}
