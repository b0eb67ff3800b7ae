//! Anchor assignment, classification/regression losses and mask-guided
//! loss weights.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::geometry::BoxF;
use crate::mask::RegionMask;
use crate::net::{encode_delta, AnchorGrid, PredictionVars};
use crate::tape::{CustomOp, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub atss_topk: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_cls: 10.0, lambda_reg: 1.2, focal_gamma: 2.0, focal_alpha: 0.25, atss_topk: 15 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignedTargets {
    pub positive: Vec<bool>,
    /// Anchor indices of the positives, ascending.
    pub positives: Vec<usize>,
    /// Regression target deltas, one per positive.
    pub targets: Vec<[f64; 4]>,
    /// Top-k candidates by center distance, nearest first.
    pub candidates: Vec<usize>,
    pub iou_threshold: f64,
}

impl AssignedTargets {
    pub fn num_positive(&self) -> usize {
        self.positives.len()
    }
}

/// Adaptive assignment: the `topk` anchors closest to the label center are
/// candidates; candidates whose IoU reaches mean + std of the candidate IoUs
/// and whose center lies inside the label become positives. If none
/// qualifies, the overlapping candidate with the highest IoU is used.
pub fn atss_assign(anchors: &AnchorGrid, label: &BoxF, topk: usize) -> AssignedTargets {
    let n = anchors.len();
    let mut order: Vec<(f64, usize)> =
        anchors.anchors.iter().enumerate().map(|(k, a)| (a.center_distance(label), k)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let candidates: Vec<usize> = order.iter().take(topk.min(n)).map(|&(_, k)| k).collect();
    let ious: Vec<f64> = candidates.iter().map(|&k| anchors.anchors[k].iou(label)).collect();
    let m = ious.len().max(1) as f64;
    let mean = ious.iter().sum::<f64>() / m;
    let var = if ious.len() > 1 {
        ious.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (ious.len() - 1) as f64
    } else {
        0.0
    };
    let iou_threshold = mean + libm::sqrt(var);
    let mut positive = vec![false; n];
    for (&k, &iou) in candidates.iter().zip(&ious) {
        let (cx, cy) = anchors.anchors[k].center();
        if iou > 0.0 && iou >= iou_threshold && label.contains_point(cx, cy) {
            positive[k] = true;
        }
    }
    if !positive.iter().any(|p| *p) {
        // fall back to the best overlapping candidate
        let best = candidates.iter().zip(&ious).filter(|(_, iou)| **iou > 0.0).fold(
            None,
            |acc: Option<(usize, f64)>, (&k, &iou)| match acc {
                Some((_, b)) if b >= iou => acc,
                _ => Some((k, iou)),
            },
        );
        if let Some((k, _)) = best {
            positive[k] = true;
        }
    }
    let positives: Vec<usize> = (0..n).filter(|&k| positive[k]).collect();
    let targets = positives.iter().map(|&k| encode_delta(&anchors.anchors[k], label)).collect();
    AssignedTargets { positive, positives, targets, candidates, iou_threshold }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Per-anchor focal term and its derivative w.r.t. the logit.
fn focal_term(x: f64, positive: bool, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = crate::tape::sigmoid(x);
    let q = 1.0 - p;
    if positive {
        // −α (1−p)^γ ln p
        let lnp = -softplus(-x);
        let qg = libm::pow(q, gamma);
        let f = -alpha * qg * lnp;
        let d = alpha * (gamma * qg * p * lnp - qg * q);
        (f, d)
    } else {
        // −(1−α) p^γ ln(1−p)
        let lnq = -softplus(x);
        let pg = libm::pow(p, gamma);
        let f = -(1.0 - alpha) * pg * lnq;
        let d = (1.0 - alpha) * (-gamma * pg * q * lnq + pg * p);
        (f, d)
    }
}

struct FocalOp {
    positive: Vec<bool>,
    gamma: f64,
    alpha: f64,
    norm: f64,
}

impl CustomOp for FocalOp {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let grad = inputs[0]
            .data()
            .iter()
            .zip(&self.positive)
            .map(|(&x, &pos)| g[0] * focal_term(x, pos, self.gamma, self.alpha).1 / self.norm)
            .collect();
        vec![Some(grad)]
    }
}

/// Focal loss summed over anchors and divided by `max(n_pos, 1)`.
pub fn focal_loss(tape: &mut Tape, logits: Var, positive: &[bool], gamma: f64, alpha: f64) -> Result<Var> {
    let x = tape.value(logits).data();
    if x.len() != positive.len() {
        return Err(shape_err!("focal_loss: {} logits, {} labels", x.len(), positive.len()));
    }
    let norm = positive.iter().filter(|p| **p).count().max(1) as f64;
    let total: f64 = x.iter().zip(positive).map(|(&x, &pos)| focal_term(x, pos, gamma, alpha).0).sum();
    let op = FocalOp { positive: positive.to_vec(), gamma, alpha, norm };
    Ok(tape.custom(&[logits], Tensor::scalar(total / norm), Box::new(op)))
}

struct L1Op {
    positives: Vec<usize>,
    targets: Vec<[f64; 4]>,
}

impl CustomOp for L1Op {
    fn name(&self) -> &'static str {
        "l1_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let d = inputs[0].data();
        let mut grad = vec![0.0; d.len()];
        let norm = (4 * self.positives.len()) as f64;
        for (&k, t) in self.positives.iter().zip(&self.targets) {
            for c in 0..4 {
                let diff = d[k * 4 + c] - t[c];
                let s = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                grad[k * 4 + c] = g[0] * s / norm;
            }
        }
        vec![Some(grad)]
    }
}

/// Mean absolute delta error over the positives; 0 when there are none.
pub fn l1_reg_loss(tape: &mut Tape, deltas: Var, positives: &[usize], targets: &[[f64; 4]]) -> Result<Var> {
    let s = tape.shape(deltas);
    if s.len() != 2 || s[1] != 4 || positives.len() != targets.len() || positives.iter().any(|&k| k >= s[0]) {
        return Err(shape_err!("l1_reg_loss: deltas {:?}, {} positives", s, positives.len()));
    }
    let d = tape.value(deltas).data();
    let mut total = 0.0;
    for (&k, t) in positives.iter().zip(targets) {
        for c in 0..4 {
            total += libm::fabs(d[k * 4 + c] - t[c]);
        }
    }
    let value = if positives.is_empty() { 0.0 } else { total / (4 * positives.len()) as f64 };
    let op = L1Op { positives: positives.to_vec(), targets: targets.to_vec() };
    Ok(tape.custom(&[deltas], Tensor::scalar(value), Box::new(op)))
}

/// Tape handles of the two loss terms and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct BaseLoss {
    pub cls: Var,
    pub reg: Var,
    pub total: Var,
    pub num_positive: usize,
}

/// `λ1·focal + λ2·L1` under adaptive assignment against `label`
/// (search-patch coordinates).
pub fn base_loss(
    tape: &mut Tape,
    pred: &PredictionVars,
    anchors: &AnchorGrid,
    label: &BoxF,
    cfg: &LossConfig,
) -> Result<BaseLoss> {
    let a = atss_assign(anchors, label, cfg.atss_topk);
    let cls = focal_loss(tape, pred.logits, &a.positive, cfg.focal_gamma, cfg.focal_alpha)?;
    let reg = l1_reg_loss(tape, pred.deltas, &a.positives, &a.targets)?;
    let c = tape.scale(cls, cfg.lambda_cls);
    let r = tape.scale(reg, cfg.lambda_reg);
    let total = tape.add(c, r)?;
    Ok(BaseLoss { cls, reg, total, num_positive: a.num_positive() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReweightConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub beta_factor: f64,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        ReweightConfig { gamma: 5.0, alpha: 7.0, beta_factor: 0.8 }
    }
}

/// Floor applied to `α − ratio` before taking the logarithm.
pub const REWEIGHT_ARG_FLOOR: f64 = 1e-3;

/// `max(0, log_γ(max(α − ratio, ε)))`.
pub fn weight_from_ratio(ratio: f64, gamma: f64, alpha: f64) -> f64 {
    let arg = (alpha - ratio).max(REWEIGHT_ARG_FLOOR);
    (libm::log(arg) / libm::log(gamma)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleWeight {
    pub weight: f64,
    pub ratio: f64,
    pub n_hat: usize,
    pub n_bar: usize,
    pub beta: f64,
}

/// Loss weight from the predicted mask `m_hat` (built with maximum score
/// `s_max`) and the pseudo-label mask `m_bar`.
pub fn reweight(m_hat: &RegionMask, m_bar: &RegionMask, s_max: f64, cfg: &ReweightConfig) -> Result<SampleWeight> {
    if m_hat.grid.shape() != m_bar.grid.shape() {
        return Err(shape_err!("reweight: masks {:?} vs {:?}", m_hat.grid.shape(), m_bar.grid.shape()));
    }
    let beta = cfg.beta_factor * s_max;
    let n_hat = m_hat.count_at_least(beta);
    let n_bar = m_bar.count_at_least(beta).max(1);
    let ratio = n_hat as f64 / n_bar as f64;
    Ok(SampleWeight { weight: weight_from_ratio(ratio, cfg.gamma, cfg.alpha), ratio, n_hat, n_bar, beta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::relative_error;
    use crate::mask::{mask_from_single_box, region_mask_values, GridSpec};
    use crate::net::{build_anchors, NetConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight transcription of the assignment rule with no sorting
    /// shortcuts: repeatedly extract the nearest remaining anchor.
    fn atss_reference(anchors: &[BoxF], label: &BoxF, topk: usize) -> Vec<bool> {
        let mut taken = vec![false; anchors.len()];
        let mut cand = Vec::new();
        for _ in 0..topk.min(anchors.len()) {
            let mut best: Option<usize> = None;
            for k in 0..anchors.len() {
                if taken[k] {
                    continue;
                }
                let d = anchors[k].center_distance(label);
                if best.map_or(true, |b| d < anchors[b].center_distance(label)) {
                    best = Some(k);
                }
            }
            taken[best.unwrap()] = true;
            cand.push(best.unwrap());
        }
        let ious: Vec<f64> = cand.iter().map(|&k| anchors[k].iou(label)).collect();
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        let sd = if ious.len() > 1 {
            (ious.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (ious.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut out = vec![false; anchors.len()];
        for (&k, &iou) in cand.iter().zip(&ious) {
            let (cx, cy) = anchors[k].center();
            out[k] =
                iou > 0.0 && iou >= mean + sd && label.x1 <= cx && cx <= label.x2 && label.y1 <= cy && cy <= label.y2;
        }
        if !out.iter().any(|p| *p) {
            let mut best: Option<usize> = None;
            for i in 0..cand.len() {
                if ious[i] > 0.0 && best.map_or(true, |b| ious[i] > ious[b]) {
                    best = Some(i);
                }
            }
            if let Some(i) = best {
                out[cand[i]] = true;
            }
        }
        out
    }

    #[test]
    fn label_equal_to_anchor_is_positive() {
        let grid = NetConfig::default().anchors();
        for k in [0, 40, 200, 404] {
            let a = atss_assign(&grid, &grid.anchors[k], 15);
            assert!(a.positive[k], "anchor {k}");
            assert!(a.num_positive() <= 15);
            assert!(a.positives.iter().all(|p| a.candidates.contains(p)));
        }
    }

    #[test]
    fn small_grid_matches_reference() {
        let grid = build_anchors(3, 3, 2.0, &[0.5, 2.0], 4.0, 16.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..300 {
            let x = rng.gen_range(0.0..12.0);
            let y = rng.gen_range(0.0..12.0);
            let b = BoxF::new(x, y, x + rng.gen_range(1.0..10.0), y + rng.gen_range(1.0..10.0));
            for topk in [1, 4, 15] {
                assert_eq!(atss_assign(&grid, &b, topk).positive, atss_reference(&grid.anchors, &b, topk));
            }
        }
    }

    #[test]
    fn overlapping_labels_get_positives() {
        let cfg = NetConfig::default();
        let grid = cfg.anchors();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let (cx, cy) = (rng.gen_range(16.0..48.0), rng.gen_range(16.0..48.0));
            let b = BoxF::from_center(cx, cy, rng.gen_range(6.0..40.0), rng.gen_range(6.0..40.0));
            let a = atss_assign(&grid, &b, 15);
            assert!(a.num_positive() >= 1 && a.num_positive() <= 15, "{b:?} {a:?}");
        }
    }

    fn focal_value(logits: &[f64], positive: &[bool], g: f64, a: f64) -> f64 {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::new(&[logits.len()], logits.to_vec()).unwrap());
        let f = focal_loss(&mut t, l, positive, g, a).unwrap();
        t.value(f).item()
    }

    #[test]
    fn focal_closed_forms() {
        let v = focal_value(&[0.0], &[true], 2.0, 0.25);
        assert!((v - (-0.25 * 0.25 * libm::log(0.5))).abs() < 1e-15);
        assert!((v - 0.04332).abs() < 1e-4);
        assert!(focal_value(&[40.0, -40.0, -40.0], &[true, false, false], 2.0, 0.25) < 1e-30);
        // γ = 0, α = 0.5 is half the binary cross-entropy
        let logits = [0.3, -1.2, 2.0, 0.0];
        let pos = [true, false, false, true];
        let bce: f64 = logits
            .iter()
            .zip(&pos)
            .map(|(&x, &p)| {
                let s = 1.0 / (1.0 + (-x as f64).exp());
                if p {
                    -s.ln()
                } else {
                    -(1.0 - s).ln()
                }
            })
            .sum::<f64>()
            / 2.0;
        assert!((focal_value(&logits, &pos, 0.0, 0.5) - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn focal_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..20).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let pos: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let mut t = Tape::new();
        let l = t.leaf(Tensor::new(&[20], x.clone()).unwrap());
        let f = focal_loss(&mut t, l, &pos, 2.0, 0.25).unwrap();
        t.backward(f).unwrap();
        let g = t.grad(l).unwrap();
        for i in 0..20 {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += 1e-5;
            m[i] -= 1e-5;
            let num = (focal_value(&p, &pos, 2.0, 0.25) - focal_value(&m, &pos, 2.0, 0.25)) / 2e-5;
            assert!(relative_error(g.data()[i], num) <= 1e-5, "{i}: {} vs {num}", g.data()[i]);
        }
    }

    #[test]
    fn l1_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut t = Tape::new();
        let v = t.leaf(Tensor::new(&[10, 4], d.clone()).unwrap());
        let pos = [1usize, 4, 7];
        let same: Vec<[f64; 4]> = pos.iter().map(|&k| [d[4 * k], d[4 * k + 1], d[4 * k + 2], d[4 * k + 3]]).collect();
        let l = l1_reg_loss(&mut t, v, &pos, &same).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        let shifted: Vec<[f64; 4]> = same.iter().map(|a| a.map(|x| x + 0.5)).collect();
        let l = l1_reg_loss(&mut t, v, &pos, &shifted).unwrap();
        assert!((t.value(l).item() - 0.5).abs() < 1e-12);
        let random: Vec<[f64; 4]> = pos.iter().map(|_| [0.0; 4].map(|_: f64| rng.gen_range(-2.0..2.0))).collect();
        let l = l1_reg_loss(&mut t, v, &pos, &random).unwrap();
        let mut oracle = 0.0;
        for (i, &k) in pos.iter().enumerate() {
            for c in 0..4 {
                oracle += (d[4 * k + c] - random[i][c]).abs();
            }
        }
        assert!((t.value(l).item() - oracle / 12.0).abs() < 1e-12);
        let l = l1_reg_loss(&mut t, v, &[], &[]).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn weight_formula() {
        assert_eq!(weight_from_ratio(2.0, 5.0, 7.0), 1.0);
        assert!((weight_from_ratio(1.0, 5.0, 7.0) - 1.113_282_752_559_378_3).abs() < 1e-9);
        assert_eq!(weight_from_ratio(6.0, 5.0, 7.0), 0.0);
        assert_eq!(weight_from_ratio(9.0, 5.0, 7.0), 0.0);
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let w = weight_from_ratio(i as f64 / 100.0, 5.0, 7.0);
            assert!(w >= 0.0 && w <= prev);
            prev = w;
        }
    }

    #[test]
    fn partial_label_gets_lower_weight() {
        let grid = GridSpec::new(16, 16, 4.0);
        let target = BoxF::new(20.0, 20.0, 44.0, 44.0);
        let m_hat = region_mask_values(&[target], &[0.9], 0.0, &grid).unwrap();
        let clean = mask_from_single_box(&target, &grid).unwrap();
        let partial = mask_from_single_box(&BoxF::new(20.0, 20.0, 32.0, 32.0), &grid).unwrap();
        let cfg = ReweightConfig::default();
        let wc = reweight(&m_hat, &clean, 0.9, &cfg).unwrap();
        let wp = reweight(&m_hat, &partial, 0.9, &cfg).unwrap();
        assert_eq!(wc.ratio, 1.0);
        assert!(wp.weight < wc.weight, "{wp:?} vs {wc:?}");
    }
}
