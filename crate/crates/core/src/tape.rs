//! Reverse-mode automatic differentiation over a linear (Wengert) tape.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! nodes in reverse index order, so gradient accumulation order is fixed by
//! the order ops were recorded and replays are bit-identical.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::conv::{self, ConvGeom, CorrGeom};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation with a hand-written vector-Jacobian product.
///
/// Domain ops (box decoding, region masks, losses) implement this so the tape
/// stays small and their gradients can be audited in one place.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input, given the output gradient.
    /// `None` means the op passes no gradient to that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    MulSpatial(Var, Var),
    AddBias(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    DepthwiseXcorr { kernel: Var, search: Var, geom: CorrGeom },
    Xcorr { kernel: Var, search: Var, geom: CorrGeom },
    NormAffine { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat(Vec<Var>),
    Sum(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    tracked: bool,
    op: Op,
}

/// Variance floor of [`Tape::norm_affine`].
pub const NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient on `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Copy of `v` that blocks gradient flow back into `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient of the last `backward` call, or `None` for untracked nodes.
    /// Tracked nodes not reached from the loss report zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.tracked {
            return None;
        }
        let shape = node.value.shape();
        Some(match &node.grad {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        })
    }

    fn push(&mut self, value: Tensor, tracked: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, tracked, op });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{}: {:?} vs {:?}", what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(value, tracked, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(va.shape(), data).expect("same shape");
        let tracked = self.tracked_any(&[a]);
        self.push(value, tracked, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(va.shape(), data).expect("same shape");
        let tracked = self.tracked_any(&[a]);
        self.push(value, tracked, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::new(va.shape(), data).expect("same shape");
        let tracked = self.tracked_any(&[a]);
        self.push(value, tracked, Op::Sigmoid(a))
    }

    /// `x[C×H×W] ⊗ m[H×W]`, broadcasting the map over channels.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (xs, ms) = (self.shape(x), self.shape(m));
        if xs.len() != 3 || ms.len() != 2 || xs[1] != ms[0] || xs[2] != ms[1] {
            return Err(shape_err!("mul_spatial: {:?} vs {:?}", xs, ms));
        }
        let hw = ms[0] * ms[1];
        let vx = self.value(x);
        let vm = self.value(m).data();
        let data = vx.data().chunks(hw).flat_map(|plane| plane.iter().zip(vm).map(|(a, b)| a * b)).collect();
        let value = Tensor::new(vx.shape(), data)?;
        let tracked = self.tracked_any(&[x, m]);
        Ok(self.push(value, tracked, Op::MulSpatial(x, m)))
    }

    /// `x[C×H×W] + b[C]`, one bias per channel.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if xs.len() != 3 || bs != [xs[0]] {
            return Err(shape_err!("add_bias: {:?} vs {:?}", xs, bs));
        }
        let hw = xs[1] * xs[2];
        let vx = self.value(x);
        let vb = self.value(b).data();
        let data = vx.data().chunks(hw).zip(vb).flat_map(|(plane, c)| plane.iter().map(move |a| a + c)).collect();
        let value = Tensor::new(vx.shape(), data)?;
        let tracked = self.tracked_any(&[x, b]);
        Ok(self.push(value, tracked, Op::AddBias(x, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: {:?} · {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        conv::gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, tracked, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err!("transpose needs rank 2, got {:?}", s));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let tracked = self.tracked_any(&[a]);
        Ok(self.push(Tensor::new(&[c, r], out)?, tracked, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let tracked = self.tracked_any(&[a]);
        Ok(self.push(value, tracked, Op::Reshape(a)))
    }

    /// Max-shifted softmax over one axis.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("softmax axis {} on rank {}", axis, shape.len()));
        }
        let v = self.value(x);
        if !v.all_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = libm::exp(src[base + j * inner] - mx);
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, tracked, Op::Softmax { x, axis }))
    }

    /// Cross-correlation convolution of `x[C×H×W]` with `w[C'×C×k×k]`; no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(shape_err!("conv2d: input {:?}, weight {:?}", xs, ws));
        }
        if ws[2] % 2 == 0 || stride == 0 {
            return Err(contract_err!("conv2d needs odd kernel and stride ≥ 1"));
        }
        if xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[2] {
            return Err(shape_err!("conv2d: kernel {} larger than padded input {:?}", ws[2], xs));
        }
        let geom = ConvGeom { c_in: xs[0], h: xs[1], w: xs[2], c_out: ws[0], k: ws[2], stride, pad };
        let out = conv::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let value = Tensor::new(&[geom.c_out, geom.out_h(), geom.out_w()], out)?;
        let tracked = self.tracked_any(&[x, w]);
        Ok(self.push(value, tracked, Op::Conv2d { x, w, geom }))
    }

    fn corr_geom(&self, kernel: Var, search: Var, what: &str) -> Result<CorrGeom> {
        let (ks, ss) = (self.shape(kernel), self.shape(search));
        if ks.len() != 3 || ss.len() != 3 || ks[0] != ss[0] {
            return Err(shape_err!("{}: kernel {:?}, search {:?}", what, ks, ss));
        }
        if ks[1] > ss[1] || ks[2] > ss[2] {
            return Err(shape_err!("{}: kernel {:?} larger than search {:?}", what, ks, ss));
        }
        Ok(CorrGeom { c: ks[0], kh: ks[1], kw: ks[2], sh: ss[1], sw: ss[2] })
    }

    /// Channel-summed sliding correlation: `1×(H−h+1)×(W−w+1)`.
    pub fn xcorr(&mut self, kernel: Var, search: Var) -> Result<Var> {
        let geom = self.corr_geom(kernel, search, "xcorr")?;
        let dw = conv::depthwise_xcorr_forward(self.value(kernel).data(), self.value(search).data(), &geom);
        let n = geom.out_h() * geom.out_w();
        let mut out = vec![0.0; n];
        for plane in dw.chunks(n) {
            for (o, v) in out.iter_mut().zip(plane) {
                *o += v;
            }
        }
        let value = Tensor::new(&[1, geom.out_h(), geom.out_w()], out)?;
        let tracked = self.tracked_any(&[kernel, search]);
        Ok(self.push(value, tracked, Op::Xcorr { kernel, search, geom }))
    }

    /// Per-channel sliding correlation: `C×(H−h+1)×(W−w+1)`.
    pub fn depthwise_xcorr(&mut self, kernel: Var, search: Var) -> Result<Var> {
        let geom = self.corr_geom(kernel, search, "depthwise_xcorr")?;
        let out = conv::depthwise_xcorr_forward(self.value(kernel).data(), self.value(search).data(), &geom);
        let value = Tensor::new(&[geom.c, geom.out_h(), geom.out_w()], out)?;
        let tracked = self.tracked_any(&[kernel, search]);
        Ok(self.push(value, tracked, Op::DepthwiseXcorr { kernel, search, geom }))
    }

    /// Per-channel standardization over spatial positions followed by a
    /// per-channel affine map.
    pub fn norm_affine(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(gain) != [xs[0]] || self.shape(bias) != [xs[0]] {
            return Err(shape_err!(
                "norm_affine: input {:?}, gain {:?}, bias {:?}",
                xs,
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; c * hw];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            let plane = &src[ch * hw..(ch + 1) * hw];
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / libm::sqrt(var + NORM_EPS);
            inv_std[ch] = is;
            for i in 0..hw {
                let xh = (plane[i] - mean) * is;
                xhat[ch * hw + i] = xh;
                out[ch * hw + i] = g[ch] * xh + b[ch];
            }
        }
        let value = Tensor::new(&xs, out)?;
        let tracked = self.tracked_any(&[x, gain, bias]);
        Ok(self.push(value, tracked, Op::NormAffine { x, gain, bias, xhat, inv_std }))
    }

    /// Concatenation along axis 0; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| contract_err!("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err!("concat: {:?} vs trailing {:?}", s, tail));
            }
            lead += s[0];
            data.extend_from_slice(self.value(*p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let tracked = self.tracked_any(parts);
        Ok(self.push(Tensor::new(&shape, data)?, tracked, Op::Concat(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let tracked = self.tracked_any(&[a]);
        self.push(Tensor::scalar(s), tracked, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Records a fused op whose forward value the caller already computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let tracked = self.tracked_any(inputs);
        self.push(value, tracked, Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Clears all gradient buffers.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Propagates d(loss)/d(node) to every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(contract_err!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        self.zero_grad();
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.node_vjp(idx, &g);
            self.nodes[idx].grad = Some(g);
            for (input, delta) in contributions {
                if !self.nodes[input.0].tracked {
                    continue;
                }
                match &mut self.nodes[input.0].grad {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&delta) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn node_vjp(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let want = |v: Var| self.nodes[v.0].tracked;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect()));
                }
                if want(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Scale(a, f) => out.push((*a, g.iter().map(|x| x * f).collect())),
            Op::Relu(a) => {
                out.push((*a, g.iter().zip(val(*a)).map(|(d, x)| if *x > 0.0 { *d } else { 0.0 }).collect()))
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                out.push((*a, g.iter().zip(y).map(|(d, s)| d * s * (1.0 - s)).collect()))
            }
            Op::MulSpatial(x, m) => {
                let hw = self.nodes[m.0].value.len();
                let (vx, vm) = (val(*x), val(*m));
                if want(*x) {
                    let dx = g.chunks(hw).flat_map(|p| p.iter().zip(vm).map(|(d, mv)| d * mv)).collect();
                    out.push((*x, dx));
                }
                if want(*m) {
                    let mut dm = vec![0.0; hw];
                    for (gp, xp) in g.chunks(hw).zip(vx.chunks(hw)) {
                        for i in 0..hw {
                            dm[i] += gp[i] * xp[i];
                        }
                    }
                    out.push((*m, dm));
                }
            }
            Op::AddBias(x, b) => {
                let c = self.nodes[b.0].value.len();
                if want(*x) {
                    out.push((*x, g.to_vec()));
                }
                if want(*b) {
                    let db = g.chunks(g.len() / c).map(|p| p.iter().sum()).collect();
                    out.push((*b, db));
                }
            }
            Op::Matmul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if want(*a) {
                    let mut da = vec![0.0; m * k];
                    conv::gemm_nt_acc(g, val(*b), &mut da, m, n, k);
                    out.push((*a, da));
                }
                if want(*b) {
                    let mut db = vec![0.0; k * n];
                    conv::gemm_tn_acc(val(*a), g, &mut db, m, k, n);
                    out.push((*b, db));
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g[i * c + j];
                    }
                }
                out.push((*a, d));
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            d[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                out.push((*x, d));
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = conv::conv2d_backward(val(*x), val(*w), g, geom, want(*x), want(*w));
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
            }
            Op::DepthwiseXcorr { kernel, search, geom } => {
                let (dk, ds) = conv::depthwise_xcorr_backward(val(*kernel), val(*search), g, geom);
                out.push((*kernel, dk));
                out.push((*search, ds));
            }
            Op::Xcorr { kernel, search, geom } => {
                let expanded: Vec<f64> = (0..geom.c).flat_map(|_| g.iter().copied()).collect();
                let (dk, ds) = conv::depthwise_xcorr_backward(val(*kernel), val(*search), &expanded, geom);
                out.push((*kernel, dk));
                out.push((*search, ds));
            }
            Op::NormAffine { x, gain, bias, xhat, inv_std } => {
                let c = inv_std.len();
                let hw = xhat.len() / c;
                let gv = val(*gain);
                let mut dx = vec![0.0; xhat.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    let gp = &g[ch * hw..(ch + 1) * hw];
                    let xp = &xhat[ch * hw..(ch + 1) * hw];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for i in 0..hw {
                        db[ch] += gp[i];
                        dg[ch] += gp[i] * xp[i];
                        let dxh = gp[i] * gv[ch];
                        sum_d += dxh;
                        sum_dx += dxh * xp[i];
                    }
                    let n = hw as f64;
                    for i in 0..hw {
                        let dxh = gp[i] * gv[ch];
                        dx[ch * hw + i] = inv_std[ch] / n * (n * dxh - sum_d - xp[i] * sum_dx);
                    }
                }
                out.push((*x, dx));
                out.push((*gain, dg));
                out.push((*bias, db));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    out.push((*p, g[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                out.push((*a, vec![g[0]; n]));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                for (v, d) in inputs.iter().zip(op.backward(&ins, &node.value, g)) {
                    if let Some(d) = d {
                        out.push((*v, d));
                    }
                }
            }
        }
        out
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}
