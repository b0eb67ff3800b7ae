//! Raw convolution and correlation kernels over flat row-major buffers.
//!
//! The tape ops call into these; the direct-loop oracles in the tests do not.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let n = ho * wo;
    let kk = g.k * g.k;
    let mut cols = vec![0.0; g.c_in * kk * n];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * kk + ky * g.k + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let n = ho * wo;
    let kk = g.k * g.k;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * kk + ky * g.k + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] += cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with four interleaved partial sums (fixed order).
#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let mut acc = [0.0f64; 4];
    let mut xc = x.chunks_exact(4);
    let mut yc = y.chunks_exact(4);
    for (a, b) in (&mut xc).zip(&mut yc) {
        acc[0] += a[0] * b[0];
        acc[1] += a[1] * b[1];
        acc[2] += a[2] * b[2];
        acc[3] += a[3] * b[3];
    }
    let mut tail = 0.0;
    for (a, b) in xc.remainder().iter().zip(yc.remainder()) {
        tail += a * b;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= m * n && out.len() >= k * n);
    let mut p = 0;
    while p + 4 <= k {
        let (o0, rest) = out[p * n..(p + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for i in 0..m {
            let (a0, a1, a2, a3) = (a[i * k + p], a[i * k + p + 1], a[i * k + p + 2], a[i * k + p + 3]);
            let brow = &b[i * n..(i + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
        p += 4;
    }
    for p in p..k {
        let orow = &mut out[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[i * k + p];
            let brow = &b[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.out_h() * g.out_w();
    let r = g.c_in * g.k * g.k;
    let mut out = vec![0.0; g.c_out * n];
    if g.is_pointwise() {
        gemm_acc(w, x, &mut out, g.c_out, r, n);
    } else {
        let cols = im2col(x, g);
        gemm_acc(w, &cols, &mut out, g.c_out, r, n);
    }
    out
}

/// Returns `(dx, dw)`; `dx` is skipped when `need_dx` is false.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let n = g.out_h() * g.out_w();
    let r = g.c_in * g.k * g.k;
    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        x
    } else {
        owned = im2col(x, g);
        &owned
    };
    let dw = need_dw.then(|| {
        let mut dw = vec![0.0; g.c_out * r];
        gemm_nt_acc(dy, cols, &mut dw, g.c_out, n, r);
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; r * n];
        gemm_tn_acc(w, dy, &mut dcols, g.c_out, r, n);
        if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![0.0; g.c_in * g.h * g.w];
            col2im(&dcols, g, &mut dx);
            dx
        }
    });
    (dx, dw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrGeom {
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
}

impl CorrGeom {
    pub fn out_h(&self) -> usize {
        self.sh - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.sw - self.kw + 1
    }
}

/// Per-channel sliding inner product: `C×(sh−kh+1)×(sw−kw+1)`.
pub fn depthwise_xcorr_forward(kernel: &[f64], search: &[f64], g: &CorrGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.c * ho * wo];
    for c in 0..g.c {
        let kp = &kernel[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
        let sp = &search[c * g.sh * g.sw..(c + 1) * g.sh * g.sw];
        let op = &mut out[c * ho * wo..(c + 1) * ho * wo];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let kv = kp[ky * g.kw + kx];
                for oy in 0..ho {
                    let srow = &sp[(oy + ky) * g.sw + kx..(oy + ky) * g.sw + kx + wo];
                    let orow = &mut op[oy * wo..(oy + 1) * wo];
                    for (o, s) in orow.iter_mut().zip(srow) {
                        *o += kv * s;
                    }
                }
            }
        }
    }
    out
}

/// Gradients of the depthwise correlation; `dy` has the forward output layout.
pub fn depthwise_xcorr_backward(kernel: &[f64], search: &[f64], dy: &[f64], g: &CorrGeom) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut dk = vec![0.0; kernel.len()];
    let mut ds = vec![0.0; search.len()];
    for c in 0..g.c {
        let kp = &kernel[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
        let sp = &search[c * g.sh * g.sw..(c + 1) * g.sh * g.sw];
        let dyp = &dy[c * ho * wo..(c + 1) * ho * wo];
        let dkp = &mut dk[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
        let dsp = &mut ds[c * g.sh * g.sw..(c + 1) * g.sh * g.sw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let kv = kp[ky * g.kw + kx];
                let mut acc = 0.0;
                for oy in 0..ho {
                    let off = (oy + ky) * g.sw + kx;
                    let drow = &dyp[oy * wo..(oy + 1) * wo];
                    let srow = &sp[off..off + wo];
                    for (d, s) in drow.iter().zip(srow) {
                        acc += d * s;
                    }
                    let dsrow = &mut dsp[off..off + wo];
                    for (o, d) in dsrow.iter_mut().zip(drow) {
                        *o += kv * d;
                    }
                }
                dkp[ky * g.kw + kx] += acc;
            }
        }
    }
    (dk, ds)
}
