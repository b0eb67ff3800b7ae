//! Siamese encoder and anchor-based region proposal head.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cpt::CptParams;
use crate::error::{shape_err, Error, Result};
use crate::geometry::BoxF;
use crate::optim::{Bound, ParamId, ParamSet};
use crate::scenes::Image;
use crate::tape::{sigmoid, CustomOp, Tape, Var};
use crate::tensor::Tensor;

/// Log-scale delta clamp used when decoding boxes.
pub const DELTA_CLAMP: f64 = 4.0;
/// Smallest box side produced by [`decode_boxes`].
pub const MIN_BOX_SIDE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub image_channels: usize,
    pub channels: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub stride: usize,
    pub anchor_scale: f64,
    pub ratios: Vec<f64>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_channels: 3,
            channels: 16,
            template_size: 32,
            search_size: 64,
            stride: 4,
            anchor_scale: 4.0,
            ratios: vec![0.33, 0.5, 1.0, 2.0, 3.0],
        }
    }
}

impl NetConfig {
    pub fn template_feat(&self) -> usize {
        self.template_size / self.stride
    }

    pub fn search_feat(&self) -> usize {
        self.search_size / self.stride
    }

    pub fn response_size(&self) -> usize {
        self.search_feat() - self.template_feat() + 1
    }

    pub fn num_anchors(&self) -> usize {
        self.response_size() * self.response_size() * self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 4 {
            return Err(Error::Config("the encoder has a fixed total stride of 4".into()));
        }
        if self.template_size % 4 != 0 || self.search_size % 4 != 0 || self.search_size < self.template_size {
            return Err(Error::Config("patch sizes must be multiples of 4 with search ≥ template".into()));
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|r| *r <= 0.0) {
            return Err(Error::Config("anchor ratios must be non-empty and positive".into()));
        }
        if self.channels == 0 || self.anchor_scale <= 0.0 {
            return Err(Error::Config("channels and anchor scale must be positive".into()));
        }
        Ok(())
    }

    pub fn anchors(&self) -> AnchorGrid {
        let n = self.response_size();
        build_anchors(n, n, self.anchor_scale, &self.ratios, self.stride as f64, self.search_size as f64)
    }
}

/// Anchors laid out ratio-major: index `k = r·H·W + i·W + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub scale: f64,
    pub ratios: Vec<f64>,
    pub stride: f64,
    pub anchors: Vec<BoxF>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// `(ratio, row, col)` of anchor `k`.
    pub fn position(&self, k: usize) -> (usize, usize, usize) {
        let hw = self.grid_h * self.grid_w;
        (k / hw, (k % hw) / self.grid_w, k % self.grid_w)
    }
}

/// One anchor per response cell and ratio, centered on the stride lattice
/// around the middle of a `patch`-sized search patch; `h / w = ratio`.
pub fn build_anchors(grid_h: usize, grid_w: usize, scale: f64, ratios: &[f64], stride: f64, patch: f64) -> AnchorGrid {
    let side = stride * scale;
    let mut anchors = Vec::with_capacity(grid_h * grid_w * ratios.len());
    for &r in ratios {
        let sr = libm::sqrt(r);
        let (w, h) = (side / sr, side * sr);
        for i in 0..grid_h {
            for j in 0..grid_w {
                let cx = patch / 2.0 + (j as f64 - (grid_w as f64 - 1.0) / 2.0) * stride;
                let cy = patch / 2.0 + (i as f64 - (grid_h as f64 - 1.0) / 2.0) * stride;
                anchors.push(BoxF::from_center(cx, cy, w, h));
            }
        }
    }
    AnchorGrid { grid_h, grid_w, scale, ratios: ratios.to_vec(), stride, anchors }
}

/// Unclamped decode of one `(dx, dy, dw, dh)` delta against an anchor.
pub fn decode_delta(a: &BoxF, d: [f64; 4]) -> BoxF {
    let (acx, acy) = a.center();
    let (aw, ah) = (a.width(), a.height());
    BoxF::from_center(acx + d[0] * aw, acy + d[1] * ah, aw * libm::exp(d[2]), ah * libm::exp(d[3]))
}

/// Inverse of [`decode_delta`]: the regression target for `b` at anchor `a`.
pub fn encode_delta(a: &BoxF, b: &BoxF) -> [f64; 4] {
    let (acx, acy) = a.center();
    let (bcx, bcy) = b.center();
    let (aw, ah) = (a.width(), a.height());
    [(bcx - acx) / aw, (bcy - acy) / ah, libm::log(b.width() / aw), libm::log(b.height() / ah)]
}

struct DecodeOp {
    anchors: Vec<BoxF>,
    limit: f64,
}

#[derive(Clone, Copy)]
struct AxisClamp {
    lo_pass: bool,
    hi_pass: bool,
    /// upper end was pinned to `lo + MIN_BOX_SIDE`
    pinned: bool,
}

impl AxisClamp {
    /// Routes output-corner gradients back to the raw corners.
    fn route(&self, g_lo: f64, g_hi: f64) -> (f64, f64) {
        let (lo_total, hi) =
            if self.pinned { (g_lo + g_hi, 0.0) } else { (g_lo, if self.hi_pass { g_hi } else { 0.0 }) };
        (if self.lo_pass { lo_total } else { 0.0 }, hi)
    }
}

struct DecodeLocal {
    aw: f64,
    ah: f64,
    /// d(side)/d(log delta), zero where the delta clamp is active
    dside_w: f64,
    dside_h: f64,
    x: AxisClamp,
    y: AxisClamp,
}

/// `min(max(v, lo), hi)` and whether `v` itself was selected (ties select `v`).
fn clamp_sel(v: f64, lo: f64, hi: f64) -> (f64, bool) {
    if v < lo {
        (lo, false)
    } else if v > hi {
        (hi, false)
    } else {
        (v, true)
    }
}

/// Clamps `lo_raw..hi_raw` into `[0, limit]` keeping a minimum side.
fn clamp_pair(lo_raw: f64, hi_raw: f64, limit: f64) -> (f64, f64, AxisClamp) {
    let (lo, lo_pass) = clamp_sel(lo_raw, 0.0, limit - MIN_BOX_SIDE);
    let (m, hi_pass) = if hi_raw <= limit { (hi_raw, true) } else { (limit, false) };
    if m >= lo + MIN_BOX_SIDE {
        (lo, m, AxisClamp { lo_pass, hi_pass, pinned: false })
    } else {
        (lo, lo + MIN_BOX_SIDE, AxisClamp { lo_pass, hi_pass: false, pinned: true })
    }
}

impl DecodeOp {
    fn eval(&self, deltas: &[f64]) -> (Vec<f64>, Vec<DecodeLocal>) {
        let k = self.anchors.len();
        let mut out = vec![0.0; k * 4];
        let mut locals = Vec::with_capacity(k);
        for (i, a) in self.anchors.iter().enumerate() {
            let d = &deltas[i * 4..i * 4 + 4];
            let (acx, acy) = a.center();
            let (aw, ah) = (a.width(), a.height());
            let cx = acx + d[0] * aw;
            let cy = acy + d[1] * ah;
            let (dw, dw_pass) = clamp_sel(d[2], -DELTA_CLAMP, DELTA_CLAMP);
            let (dh, dh_pass) = clamp_sel(d[3], -DELTA_CLAMP, DELTA_CLAMP);
            let w = aw * libm::exp(dw);
            let h = ah * libm::exp(dh);
            let (x1, x2, x) = clamp_pair(cx - w / 2.0, cx + w / 2.0, self.limit);
            let (y1, y2, y) = clamp_pair(cy - h / 2.0, cy + h / 2.0, self.limit);
            out[i * 4..i * 4 + 4].copy_from_slice(&[x1, y1, x2, y2]);
            locals.push(DecodeLocal {
                aw,
                ah,
                dside_w: if dw_pass { w } else { 0.0 },
                dside_h: if dh_pass { h } else { 0.0 },
                x,
                y,
            });
        }
        (out, locals)
    }
}

impl CustomOp for DecodeOp {
    fn name(&self) -> &'static str {
        "decode_boxes"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (_, locals) = self.eval(inputs[0].data());
        let mut d = vec![0.0; g.len()];
        for (i, l) in locals.iter().enumerate() {
            let (rx1, rx2) = l.x.route(g[i * 4], g[i * 4 + 2]);
            let (ry1, ry2) = l.y.route(g[i * 4 + 1], g[i * 4 + 3]);
            // raw corners are center ∓ side/2
            d[i * 4] = (rx1 + rx2) * l.aw;
            d[i * 4 + 1] = (ry1 + ry2) * l.ah;
            d[i * 4 + 2] = 0.5 * (rx2 - rx1) * l.dside_w;
            d[i * 4 + 3] = 0.5 * (ry2 - ry1) * l.dside_h;
        }
        vec![Some(d)]
    }
}

/// Decodes `deltas[K×4]` against the anchors into boxes clamped to the
/// `limit × limit` search patch. Differentiable in the deltas.
pub fn decode_boxes(tape: &mut Tape, deltas: Var, anchors: &AnchorGrid, limit: f64) -> Result<Var> {
    let k = anchors.len();
    if tape.shape(deltas) != [k, 4] {
        return Err(shape_err!("decode_boxes: deltas {:?} for {} anchors", tape.shape(deltas), k));
    }
    if !tape.value(deltas).all_finite() {
        return Err(Error::Numeric("non-finite box deltas".into()));
    }
    let op = DecodeOp { anchors: anchors.anchors.clone(), limit };
    let (out, _) = op.eval(tape.value(deltas).data());
    Ok(tape.custom(&[deltas], Tensor::new(&[k, 4], out)?, Box::new(op)))
}

pub fn boxes_from_tensor(t: &Tensor) -> Vec<BoxF> {
    t.data().chunks(4).map(|c| BoxF::new(c[0], c[1], c[2], c[3])).collect()
}

/// Parameter handles of the shared encoder.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub conv: [ParamId; 3],
    pub gain: [ParamId; 3],
    pub bias: [ParamId; 3],
}

/// One correlation branch: kernel/search adjusters, then a two-layer 1×1 head
/// with a normalized hidden layer.
#[derive(Debug, Clone)]
pub struct BranchParams {
    pub kernel_adj: ParamId,
    pub search_adj: ParamId,
    pub hidden: ParamId,
    pub hidden_gain: ParamId,
    pub hidden_bias: ParamId,
    pub out: ParamId,
    pub out_bias: ParamId,
}

/// Initial class bias: foreground prior of 1%, so the untrained head does not
/// flood the focal loss with confident negatives.
pub const CLS_PRIOR_BIAS: f64 = -4.59511985013459;

#[derive(Debug, Clone)]
pub struct RpnParams {
    pub cls: BranchParams,
    pub reg: BranchParams,
}

pub(crate) fn init_weight(rng: &mut ChaCha8Rng, shape: &[usize], gain: f64) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let a = gain * libm::sqrt(3.0 / fan_in as f64);
    Tensor::from_fn(shape, |_| rng.gen_range(-a..a))
}

/// All learnable state: encoder, proposal head and the template transform.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: NetConfig,
    pub params: ParamSet,
    pub encoder: EncoderParams,
    pub rpn: RpnParams,
    pub cpt: CptParams,
}

impl Model {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let c = cfg.channels;
        let r = cfg.ratios.len();
        let ic = cfg.image_channels;
        let mut conv = Vec::new();
        let mut gain = Vec::new();
        let mut bias = Vec::new();
        for (l, cin) in [ic, c, c].into_iter().enumerate() {
            conv.push(params.insert(&format!("encoder.conv{l}"), init_weight(&mut rng, &[c, cin, 3, 3], 1.4))?);
            gain.push(params.insert(&format!("encoder.norm{l}.gain"), Tensor::filled(&[c], 1.0))?);
            bias.push(params.insert(&format!("encoder.norm{l}.bias"), Tensor::zeros(&[c]))?);
        }
        let encoder = EncoderParams {
            conv: [conv[0], conv[1], conv[2]],
            gain: [gain[0], gain[1], gain[2]],
            bias: [bias[0], bias[1], bias[2]],
        };
        let mut branch = |name: &str, outs: usize, bias: f64, params: &mut ParamSet| -> Result<BranchParams> {
            let mut w = |suffix: &str, shape: &[usize], gain: f64| {
                params.insert(&format!("rpn.{name}.{suffix}"), init_weight(&mut rng, shape, gain))
            };
            let kernel_adj = w("kernel_adj", &[c, c, 1, 1], 1.0)?;
            let search_adj = w("search_adj", &[c, c, 1, 1], 1.0)?;
            let hidden = w("hidden", &[c, c, 1, 1], 1.0)?;
            let out = w("out", &[outs, c, 1, 1], 0.1)?;
            Ok(BranchParams {
                kernel_adj,
                search_adj,
                hidden,
                hidden_gain: params.insert(&format!("rpn.{name}.hidden_norm.gain"), Tensor::filled(&[c], 1.0))?,
                hidden_bias: params.insert(&format!("rpn.{name}.hidden_norm.bias"), Tensor::zeros(&[c]))?,
                out,
                out_bias: params.insert(&format!("rpn.{name}.out_bias"), Tensor::filled(&[outs], bias))?,
            })
        };
        let rpn = RpnParams {
            cls: branch("cls", r, CLS_PRIOR_BIAS, &mut params)?,
            reg: branch("reg", 4 * r, 0.0, &mut params)?,
        };
        let cpt = CptParams::register(&mut params, c, &mut rng)?;
        Ok(Model { cfg, params, encoder, rpn, cpt })
    }

    /// Binds parameters as gradient leaves (training).
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    /// Binds parameters as constants (inference; no gradients recorded).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.params.bind_frozen(tape)
    }
}

pub fn image_tensor(img: &Image) -> Tensor {
    Tensor::new(&[img.channels, img.height, img.width], img.data.clone()).expect("image layout")
}

/// Shared encoder: three 3×3 convolutions (strides 2, 2, 1), each normalized;
/// the first two followed by ReLU. Total stride 4.
pub fn encode(tape: &mut Tape, bound: &Bound, model: &Model, patch: &Image) -> Result<Var> {
    if patch.height % 4 != 0 || patch.width % 4 != 0 || patch.channels != model.cfg.image_channels {
        return Err(shape_err!(
            "encode: patch {}×{}×{} incompatible with stride 4 / {} channels",
            patch.channels,
            patch.height,
            patch.width,
            model.cfg.image_channels
        ));
    }
    let e = &model.encoder;
    let mut h = tape.constant(image_tensor(patch));
    for (l, stride) in [2usize, 2, 1].into_iter().enumerate() {
        h = tape.conv2d(h, bound.var(e.conv[l]), stride, 1)?;
        h = tape.norm_affine(h, bound.var(e.gain[l]), bound.var(e.bias[l]))?;
        if l < 2 {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Tape handles of one head evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PredictionVars {
    /// Raw class logits, `[K]`.
    pub logits: Var,
    /// Box deltas, `[K×4]`.
    pub deltas: Var,
    /// Decoded boxes in search-patch pixels, `[K×4]`.
    pub boxes: Var,
}

/// Plain-value view of a head evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub cls: Vec<f64>,
    pub reg: Vec<BoxF>,
}

impl PredictionVars {
    pub fn values(&self, tape: &Tape) -> Prediction {
        let logits = tape.value(self.logits).data().to_vec();
        let cls = logits.iter().map(|&l| sigmoid(l)).collect();
        Prediction { logits, cls, reg: boxes_from_tensor(tape.value(self.boxes)) }
    }
}

fn branch_forward(tape: &mut Tape, bound: &Bound, p: &BranchParams, kernel: Var, search: Var) -> Result<Var> {
    let k = tape.conv2d(kernel, bound.var(p.kernel_adj), 1, 0)?;
    let s = tape.conv2d(search, bound.var(p.search_adj), 1, 0)?;
    let corr = tape.depthwise_xcorr(k, s)?;
    let h = tape.conv2d(corr, bound.var(p.hidden), 1, 0)?;
    let h = tape.norm_affine(h, bound.var(p.hidden_gain), bound.var(p.hidden_bias))?;
    let h = tape.relu(h);
    let o = tape.conv2d(h, bound.var(p.out), 1, 0)?;
    tape.add_bias(o, bound.var(p.out_bias))
}

/// Depthwise correlation of `kernel` over `search_feat` feeding the class
/// and box heads; deltas are decoded against `anchors`.
pub fn rpn_forward(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    kernel: Var,
    search_feat: Var,
    anchors: &AnchorGrid,
) -> Result<PredictionVars> {
    let (ks, ss) = (tape.shape(kernel), tape.shape(search_feat));
    if ks.len() != 3 || ss.len() != 3 || ks[0] != ss[0] || ks[0] != model.cfg.channels {
        return Err(shape_err!("rpn_forward: kernel {:?}, search {:?}", ks, ss));
    }
    let k = anchors.len();
    let cls = branch_forward(tape, bound, &model.rpn.cls, kernel, search_feat)?;
    if tape.value(cls).len() != k {
        return Err(shape_err!("rpn_forward: {} logits for {} anchors", tape.value(cls).len(), k));
    }
    let logits = tape.reshape(cls, &[k])?;
    let reg = branch_forward(tape, bound, &model.rpn.reg, kernel, search_feat)?;
    let reg = tape.reshape(reg, &[4, k])?;
    let deltas = tape.transpose(reg)?;
    let boxes = decode_boxes(tape, deltas, anchors, model.cfg.search_size as f64)?;
    Ok(PredictionVars { logits, deltas, boxes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::scenes::{crop_patch, generate_sequence, SceneSpec};

    #[test]
    fn feature_shapes() {
        let model = Model::new(NetConfig::default(), 1).unwrap();
        let seq = generate_sequence(&SceneSpec { frames: 4, ..Default::default() }, 1).unwrap();
        let mut t = Tape::new();
        let b = model.bind(&mut t);
        let z = crop_patch(&seq.frames[0], (64.0, 64.0), 32, 40.0);
        let x = crop_patch(&seq.frames[0], (64.0, 64.0), 64, 80.0);
        let fz = encode(&mut t, &b, &model, &z.image).unwrap();
        let fx = encode(&mut t, &b, &model, &x.image).unwrap();
        assert_eq!(t.shape(fz), &[16, 8, 8]);
        assert_eq!(t.shape(fx), &[16, 16, 16]);
        let fz2 = encode(&mut t, &b, &model, &z.image).unwrap();
        assert_eq!(t.value(fz), t.value(fz2));
        let odd = crop_patch(&seq.frames[0], (64.0, 64.0), 30, 40.0);
        assert!(matches!(encode(&mut t, &b, &model, &odd.image), Err(Error::Shape(_))));
    }

    #[test]
    fn shared_encoder_parameters() {
        // both paths read the same parameter nodes: gradients from each add up
        let model = Model::new(NetConfig::default(), 2).unwrap();
        let seq = generate_sequence(&SceneSpec { frames: 4, ..Default::default() }, 2).unwrap();
        let z = crop_patch(&seq.frames[0], (64.0, 64.0), 32, 40.0).image;
        let grad_of = |use_z: bool, use_x: bool| {
            let mut t = Tape::new();
            let b = model.bind(&mut t);
            let mut total = t.constant(Tensor::scalar(0.0));
            for (on, img) in [(use_z, &z), (use_x, &z)] {
                if on {
                    let f = encode(&mut t, &b, &model, img).unwrap();
                    let s = t.sum(f);
                    let s = t.mul(s, s).unwrap();
                    total = t.add(total, s).unwrap();
                }
            }
            t.backward(total).unwrap();
            t.grad(b.var(model.encoder.conv[0])).unwrap()
        };
        let both = grad_of(true, true);
        let one = grad_of(true, false);
        for (a, b) in both.data().iter().zip(one.data()) {
            assert!((a - 2.0 * b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn anchor_grid_layout() {
        let cfg = NetConfig::default();
        let g = cfg.anchors();
        assert_eq!(g.len(), 405);
        assert_eq!(cfg.num_anchors(), 405);
        let g2 = build_anchors(9, 9, 8.0, &[1.0], 4.0, 64.0);
        let a = g2.anchors[40];
        assert!((a.width() - 32.0).abs() < 1e-12 && (a.height() - 32.0).abs() < 1e-12);
        assert_eq!(a.center(), (32.0, 32.0));
        for (k, a) in g.anchors.iter().enumerate() {
            let (r, i, j) = g.position(k);
            let (cx, cy) = a.center();
            assert!(((cx - 16.0) / 4.0 - j as f64).abs() < 1e-9);
            assert!(((cy - 16.0) / 4.0 - i as f64).abs() < 1e-9);
            assert!((a.height() / a.width() - cfg.ratios[r]).abs() < 1e-9);
            assert!(a.width() > 0.0 && a.height() > 0.0);
        }
    }

    #[test]
    fn zero_kernel_propagates_zeros() {
        let model = Model::new(NetConfig::default(), 3).unwrap();
        let anchors = model.cfg.anchors();
        let mut t = Tape::new();
        let b = model.bind(&mut t);
        let kernel = t.constant(Tensor::zeros(&[16, 8, 8]));
        let search = t.constant(Tensor::from_fn(&[16, 16, 16], |i| (i as f64 * 0.37).sin()));
        let p = rpn_forward(&mut t, &b, &model, kernel, search, &anchors).unwrap();
        let v = p.values(&t);
        assert_eq!(v.cls.len(), 405);
        assert_eq!(v.reg.len(), 405);
        assert!(v.logits.iter().all(|l| *l == v.logits[0]));
        assert!(t.value(p.deltas).data().iter().all(|d| *d == 0.0));
        for (r, a) in v.reg.iter().zip(&anchors.anchors) {
            let clamped = crate::scenes::clamp_box(a, (64.0, 64.0), MIN_BOX_SIDE);
            for (x, y) in r.to_array().iter().zip(clamped.to_array()) {
                assert!((x - y).abs() <= 1e-12, "{r:?} vs {clamped:?}");
            }
        }
    }

    #[test]
    fn decode_closed_forms() {
        let a = BoxF::new(10.0, 10.0, 30.0, 20.0);
        assert_eq!(decode_delta(&a, [0.0; 4]), a);
        let b = decode_delta(&a, [0.0, 0.0, libm::log(2.0), 0.0]);
        assert!((b.width() - 40.0).abs() < 1e-12);
        let grid = AnchorGrid { grid_h: 1, grid_w: 1, scale: 1.0, ratios: vec![1.0], stride: 1.0, anchors: vec![a] };
        let mut t = Tape::new();
        let d = t.leaf(Tensor::zeros(&[1, 4]));
        let out = decode_boxes(&mut t, d, &grid, 64.0).unwrap();
        assert_eq!(t.value(out).data(), &a.to_array());
    }

    #[test]
    fn decode_encode_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let anchors = NetConfig::default().anchors();
        for _ in 0..500 {
            let k = rng.gen_range(0..anchors.len());
            let d = [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ];
            let back = encode_delta(&anchors.anchors[k], &decode_delta(&anchors.anchors[k], d));
            for (x, y) in back.iter().zip(d) {
                assert!((x - y).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn decode_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let anchors = NetConfig::default().anchors();
        let k = anchors.len();
        let weights = Tensor::from_fn(&[k, 4], |_| rng.gen_range(-1.0..1.0));
        // small deltas keep every corner away from the clamp kinks
        let deltas = Tensor::from_fn(&[k, 4], |_| rng.gen_range(-0.05..0.05));
        let err = grad_check(
            |t, d| {
                let b = decode_boxes(t, d, &anchors, 1000.0)?;
                let w = t.constant(weights.clone());
                let p = t.mul(b, w)?;
                Ok(t.sum(p))
            },
            &deltas,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn decode_gradient_through_active_clamps() {
        // boxes poking out of a small patch exercise the clamp branches
        let anchors = build_anchors(3, 3, 4.0, &[0.5, 2.0], 4.0, 12.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = anchors.len();
        let weights = Tensor::from_fn(&[k, 4], |_| rng.gen_range(-1.0..1.0));
        let deltas = Tensor::from_fn(&[k, 4], |i| 0.37 * ((i * 7919) % 13) as f64 / 13.0 - 0.1);
        let err = grad_check(
            |t, d| {
                let b = decode_boxes(t, d, &anchors, 12.0)?;
                let w = t.constant(weights.clone());
                let p = t.mul(b, w)?;
                Ok(t.sum(p))
            },
            &deltas,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn decoded_boxes_never_degenerate() {
        let anchors = NetConfig::default().anchors();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        for _ in 0..20 {
            let d = t.constant(Tensor::from_fn(&[405, 4], |_| rng.gen_range(-30.0..30.0)));
            let b = decode_boxes(&mut t, d, &anchors, 64.0).unwrap();
            for bx in boxes_from_tensor(t.value(b)) {
                assert!(bx.width() >= MIN_BOX_SIDE - 1e-12 && bx.height() >= MIN_BOX_SIDE - 1e-12);
                assert!(bx.x1 >= 0.0 && bx.x2 <= 64.0);
            }
        }
    }
}
