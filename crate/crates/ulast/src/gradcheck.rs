//! Gradient verification suites behind the `gradcheck` command. Each suite
//! compares tape gradients with central differences (h = 1e-5).

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use ulast_core::cpt::{cpt_forward, CptConfig, CptMode};
use ulast_core::gradcheck::{grad_check, relative_error};
use ulast_core::loss::{base_loss, focal_loss, l1_reg_loss, LossConfig};
use ulast_core::mask::{grid_overlap, region_mask, GridSpec};
use ulast_core::net::{encode, rpn_forward, Model, NetConfig};
use ulast_core::scenes::{crop_patch, generate_sequence, SceneSpec};
use ulast_core::tape::{Tape, Var};
use ulast_core::tensor::Tensor;
use ulast_core::BoxF;

use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
/// Region-mask tolerance; the mask is piecewise linear in box corners.
pub const MASK_TOL: f64 = 1e-4;
/// Tolerance for smooth elementwise and linear-algebra ops.
pub const OP_TOL: f64 = 1e-5;
/// Whole-network tolerance: ReLU and clamp kinks sit near some probes.
pub const NET_TOL: f64 = 1e-4;
/// Edges stay this far (in cells) from grid lines.
pub const EDGE_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.threshold
    }

    pub fn line(&self) -> String {
        format!(
            "{:<12} {} points={} max_rel_err={:.3e} threshold={:.0e} time={:.2}s",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.points,
            self.max_rel_err,
            self.threshold,
            self.seconds
        )
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn weighted_sum(t: &mut Tape, y: Var, w: &Tensor) -> ulast_core::Result<Var> {
    let wv = t.constant(w.clone());
    let p = t.mul(y, wv)?;
    Ok(t.sum(p))
}

/// Every primitive op on random smooth inputs, one graph per op.
pub fn tape_ops_suite(seed: u64) -> Result<SuiteResult> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut points = 0;
    type Build = Box<dyn Fn(&mut Tape, Var) -> ulast_core::Result<Var>>;
    let mut cases: Vec<(Vec<usize>, Build)> = Vec::new();
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let probe = rand_tensor(&mut rng, &[3, 3, 3], -1.0, 1.0);
    cases.push((
        vec![2, 6, 6],
        Box::new(move |t, x| {
            let wv = t.constant(w.clone());
            let y = t.conv2d(x, wv, 2, 1)?;
            let p = t.constant(probe.clone());
            let y = t.mul(y, p)?;
            Ok(t.sum(y))
        }),
    ));
    let k = rand_tensor(&mut rng, &[3, 2, 2], -1.0, 1.0);
    let probe = rand_tensor(&mut rng, &[3, 4, 4], -1.0, 1.0);
    cases.push((
        vec![3, 5, 5],
        Box::new(move |t, x| {
            let kv = t.constant(k.clone());
            let y = t.depthwise_xcorr(kv, x)?;
            let p = t.constant(probe.clone());
            let y = t.mul(y, p)?;
            Ok(t.sum(y))
        }),
    ));
    let s = rand_tensor(&mut rng, &[3, 5, 5], -1.0, 1.0);
    let probe = rand_tensor(&mut rng, &[1, 4, 4], -1.0, 1.0);
    cases.push((
        vec![3, 2, 2],
        Box::new(move |t, x| {
            let sv = t.constant(s.clone());
            let y = t.xcorr(x, sv)?;
            let p = t.constant(probe.clone());
            let y = t.mul(y, p)?;
            Ok(t.sum(y))
        }),
    ));
    let g = rand_tensor(&mut rng, &[3], 0.5, 1.5);
    let b = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    let probe = rand_tensor(&mut rng, &[3, 4, 4], -1.0, 1.0);
    cases.push((
        vec![3, 4, 4],
        Box::new(move |t, x| {
            let (gv, bv) = (t.constant(g.clone()), t.constant(b.clone()));
            let y = t.norm_affine(x, gv, bv)?;
            let y = t.sigmoid(y);
            let p = t.constant(probe.clone());
            let y = t.mul(y, p)?;
            Ok(t.sum(y))
        }),
    ));
    let m = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let probe = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    cases.push((
        vec![3, 4],
        Box::new(move |t, x| {
            let mv = t.constant(m.clone());
            let y = t.matmul(x, mv)?;
            let a = t.softmax(y, 1)?;
            let c = t.softmax(y, 0)?;
            let y = t.add(a, c)?;
            let p = t.constant(probe.clone());
            let y = t.mul(y, p)?;
            let yt = t.transpose(y)?;
            let yr = t.reshape(yt, &[15])?;
            Ok(t.sum(yr))
        }),
    ));
    let x2 = rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let bias = rand_tensor(&mut rng, &[2], -1.0, 1.0);
    cases.push((
        vec![3, 3],
        Box::new(move |t, m| {
            let xv = t.constant(x2.clone());
            let y = t.mul_spatial(xv, m)?;
            let bv = t.constant(bias.clone());
            let y = t.add_bias(y, bv)?;
            let sq = t.mul(y, y)?;
            let h = t.scale(sq, 0.5);
            let d = t.sub(h, y)?;
            let r = t.reshape(d, &[18])?;
            let c = t.concat(&[r, r])?;
            Ok(t.mean(c))
        }),
    ));
    for (shape, f) in &cases {
        let x = rand_tensor(&mut rng, shape, -1.0, 1.0);
        worst = worst.max(grad_check(|t, v| f(t, v), &x, FD_STEP)?);
        points += x.len();
    }
    // ReLU away from its kink
    let x = Tensor::from_fn(&[12], |i| if i % 2 == 0 { 0.2 + i as f64 * 0.1 } else { -0.3 - i as f64 * 0.1 });
    let w = rand_tensor(&mut rng, &[12], -1.0, 1.0);
    worst = worst.max(grad_check(
        |t, v| {
            let y = t.relu(v);
            weighted_sum(t, y, &w)
        },
        &x,
        FD_STEP,
    )?);
    points += x.len();
    Ok(SuiteResult {
        name: "tape_ops".into(),
        points,
        max_rel_err: worst,
        threshold: OP_TOL,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

fn off_boundary(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    loop {
        let v: f64 = rng.gen_range(lo..hi);
        let f = v - v.floor();
        if f >= EDGE_MARGIN && f <= 1.0 - EDGE_MARGIN {
            return v;
        }
    }
}

/// One region-mask test point: up to three boxes with scores, every edge at
/// least [`EDGE_MARGIN`] cells from a grid line, and no near-tie between
/// the per-cell winners (a tie flips under the probe and is not a gradient).
pub fn mask_test_point(rng: &mut ChaCha8Rng, grid: &GridSpec) -> (Vec<BoxF>, Vec<f64>) {
    let (gw, gh) = (grid.cols as f64, grid.rows as f64);
    loop {
        let n = rng.gen_range(1..=3);
        let mut boxes = Vec::new();
        for _ in 0..n {
            let x1 = off_boundary(rng, 0.0, gw - 1.0);
            let y1 = off_boundary(rng, 0.0, gh - 1.0);
            let x2 = off_boundary(rng, x1 + 0.5, gw);
            let y2 = off_boundary(rng, y1 + 0.5, gh);
            boxes.push(BoxF::new(x1, y1, x2, y2));
        }
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let maps: Vec<Vec<f64>> = boxes.iter().map(|b| grid_overlap(b, grid).expect("valid box")).collect();
        let tie = (0..grid.len()).any(|c| {
            let mut v: Vec<f64> = maps.iter().zip(&scores).map(|(m, s)| m[c] * s).filter(|v| *v > 0.0).collect();
            v.sort_by(|a, b| b.total_cmp(a));
            v.len() >= 2 && v[0] - v[1] < 1e-6
        });
        if !tie {
            return (boxes, scores);
        }
    }
}

/// Worst relative error of ∂(ΣM)/∂(boxes, scores) at one test point.
pub fn mask_point_error(boxes: &[BoxF], scores: &[f64], grid: &GridSpec) -> Result<f64> {
    let bt = Tensor::new(&[boxes.len(), 4], boxes.iter().flat_map(|b| b.to_array()).collect())?;
    let st = Tensor::new(&[scores.len()], scores.to_vec())?;
    let eval = |b: &Tensor, s: &Tensor, grads: bool| -> Result<(f64, Option<(Tensor, Tensor)>)> {
        let mut t = Tape::new();
        let (bv, sv) = (t.leaf(b.clone()), t.leaf(s.clone()));
        let (m, _) = region_mask(&mut t, bv, sv, grid, 0.0, false)?;
        let l = t.sum(m);
        let v = t.value(l).item();
        if !grads {
            return Ok((v, None));
        }
        t.backward(l)?;
        Ok((v, Some((t.grad(bv).expect("tracked"), t.grad(sv).expect("tracked")))))
    };
    let (_, g) = eval(&bt, &st, true)?;
    let (gb, gs) = g.expect("requested");
    let mut worst = 0.0f64;
    for i in 0..bt.len() {
        let (mut p, mut m) = (bt.clone(), bt.clone());
        p.data_mut()[i] += FD_STEP;
        m.data_mut()[i] -= FD_STEP;
        let num = (eval(&p, &st, false)?.0 - eval(&m, &st, false)?.0) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(gb.data()[i], num));
    }
    for i in 0..st.len() {
        let (mut p, mut m) = (st.clone(), st.clone());
        p.data_mut()[i] += FD_STEP;
        m.data_mut()[i] -= FD_STEP;
        let num = (eval(&bt, &p, false)?.0 - eval(&bt, &m, false)?.0) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(gs.data()[i], num));
    }
    Ok(worst)
}

/// Σ-of-mask gradients on a 9×9 grid at `points` random test points.
pub fn region_mask_suite(points: usize, seed: u64) -> Result<SuiteResult> {
    let t0 = Instant::now();
    let grid = GridSpec::new(9, 9, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let (boxes, scores) = mask_test_point(&mut rng, &grid);
        worst = worst.max(mask_point_error(&boxes, &scores, &grid)?);
    }
    Ok(SuiteResult {
        name: "region_mask".into(),
        points,
        max_rel_err: worst,
        threshold: MASK_TOL,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Focal and L1 losses through the tape.
pub fn loss_suite(seed: u64) -> Result<SuiteResult> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = rand_tensor(&mut rng, &[30], -4.0, 4.0);
    let positive: Vec<bool> = (0..30).map(|i| i % 4 == 1).collect();
    let mut worst = grad_check(|t, x| focal_loss(t, x, &positive, 2.0, 0.25), &logits, FD_STEP)?;
    // L1 away from its kink: targets offset from every delta
    let deltas = rand_tensor(&mut rng, &[10, 4], -1.0, 1.0);
    let positives = vec![1usize, 4, 7];
    let targets: Vec<[f64; 4]> = positives
        .iter()
        .map(|&k| {
            let d = &deltas.data()[4 * k..4 * k + 4];
            [d[0] + 0.3, d[1] - 0.4, d[2] + 0.5, d[3] - 0.2]
        })
        .collect();
    worst = worst.max(grad_check(|t, x| l1_reg_loss(t, x, &positives, &targets), &deltas, FD_STEP)?);
    Ok(SuiteResult {
        name: "losses".into(),
        points: logits.len() + deltas.len(),
        max_rel_err: worst,
        threshold: OP_TOL,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Template transform: gradient to the search feature, mask and hidden
/// template in every query mode.
pub fn cpt_suite(seed: u64) -> Result<SuiteResult> {
    let t0 = Instant::now();
    let c = 4;
    let model = Model::new(NetConfig { channels: c, ..NetConfig::default() }, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let search = rand_tensor(&mut rng, &[c, 6, 6], -0.5, 0.5);
    let mask = rand_tensor(&mut rng, &[6, 6], 0.1, 1.0);
    let t1 = rand_tensor(&mut rng, &[c, 2, 2], -1.0, 1.0);
    let h0 = rand_tensor(&mut rng, &[c, 2, 2], -1.0, 1.0);
    let probe = rand_tensor(&mut rng, &[c, 2, 2], -1.0, 1.0);
    let mut worst = 0.0f64;
    let mut points = 0;
    for mode in [CptMode::LongShort, CptMode::LongOnly, CptMode::ShortOnly] {
        let cfg = CptConfig { mode, ..CptConfig::default() };
        for which in 0..3 {
            let x = [&search, &mask, &h0][which].clone();
            let err = grad_check(
                |t, v| {
                    let b = model.bind_frozen(t);
                    let pick = |t: &mut Tape, i: usize, src: &Tensor| if i == which { v } else { t.constant(src.clone()) };
                    let sv = pick(t, 0, &search);
                    let mv = pick(t, 1, &mask);
                    let hv = pick(t, 2, &h0);
                    let tv = t.constant(t1.clone());
                    let out = cpt_forward(t, &b, &model.cpt, &cfg, sv, mv, tv, Some(hv))?;
                    let p = t.constant(probe.clone());
                    let a = t.mul(out.template, p)?;
                    let a = t.sum(a);
                    let h = t.sum(out.hidden);
                    t.add(a, h)
                },
                &x,
                FD_STEP,
            )?;
            worst = worst.max(err);
            points += x.len();
        }
    }
    Ok(SuiteResult {
        name: "cpt".into(),
        points,
        max_rel_err: worst,
        threshold: OP_TOL,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Base loss of a small network on a real crop, against sampled parameter
/// coordinates. Errors are relative to `max(|a|, |n|, 1e-3·max|grad|)` so
/// coordinates with negligible gradient do not measure round-off.
pub fn network_suite(seed: u64, probes: usize) -> Result<SuiteResult> {
    let t0 = Instant::now();
    let net = NetConfig { channels: 4, ..NetConfig::default() };
    let model = Model::new(net.clone(), seed)?;
    let seq = generate_sequence(&SceneSpec { frames: 4, ..SceneSpec::default() }, seed)?;
    let gt = seq.gt_boxes[0];
    let side = ulast_core::scenes::context_side(gt.width(), gt.height());
    let z = crop_patch(&seq.frames[0], gt.center(), net.template_size, side).image;
    let xp = crop_patch(&seq.frames[0], gt.center(), net.search_size, 2.0 * side);
    let label = xp.to_patch(&gt);
    let anchors = net.anchors();
    let loss_of = |m: &Model, grads: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut t = Tape::new();
        let b = m.bind(&mut t);
        let k = encode(&mut t, &b, m, &z)?;
        let s = encode(&mut t, &b, m, &xp.image)?;
        let p = rpn_forward(&mut t, &b, m, k, s, &anchors)?;
        let l = base_loss(&mut t, &p, &anchors, &label, &LossConfig::default())?;
        let v = t.value(l.total).item();
        if !grads {
            return Ok((v, Vec::new()));
        }
        t.backward(l.total)?;
        Ok((v, ulast_core::optim::ParamSet::collect_grads(&t, &b)))
    };
    let (_, grads) = loss_of(&model, true)?;
    let gmax = grads.iter().flatten().flatten().fold(0.0f64, |a, g| a.max(g.abs()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let mut worst = 0.0f64;
    let n_params = model.params.len();
    for _ in 0..probes {
        let pi = rng.gen_range(0..n_params);
        let id = ulast_core::optim::ParamId(pi);
        let len = model.params.get(id).tensor.len();
        let ci = rng.gen_range(0..len);
        let bump = |d: f64| -> Result<f64> {
            let mut m = model.clone();
            m.params.get_mut(id).tensor.data_mut()[ci] += d;
            Ok(loss_of(&m, false)?.0)
        };
        let num = (bump(FD_STEP)? - bump(-FD_STEP)?) / (2.0 * FD_STEP);
        let a = grads[pi].as_ref().map_or(0.0, |g| g[ci]);
        let denom = a.abs().max(num.abs()).max(1e-3 * gmax);
        worst = worst.max((a - num).abs() / denom);
    }
    Ok(SuiteResult {
        name: "network".into(),
        points: probes,
        max_rel_err: worst,
        threshold: NET_TOL,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

pub fn all_suites(seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        tape_ops_suite(seed)?,
        region_mask_suite(200, seed)?,
        loss_suite(seed)?,
        cpt_suite(seed)?,
        network_suite(seed, 40)?,
    ])
}
