//! Synthetic tracking videos: a textured target rectangle drifting and
//! rescaling over a cluttered background with look-alike distractors.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Affine, BoxF};

/// Channel-major image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Image { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel_means(&self) -> Vec<f64> {
        let hw = (self.height * self.width) as f64;
        self.data.chunks(self.height * self.width).map(|p| p.iter().sum::<f64>() / hw).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Initial target side range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Largest per-frame displacement of the target center.
    pub max_speed: f64,
    /// Largest per-frame relative change of the target size.
    pub max_scale_step: f64,
    pub n_distractors: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 128,
            height: 128,
            frames: 24,
            min_size: 14.0,
            max_size: 26.0,
            max_speed: 3.0,
            max_scale_step: 0.03,
            n_distractors: 2,
            noise: 0.02,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let side = self.width.min(self.height) as f64;
        if self.width < 32 || self.height < 32 {
            return Err(Error::Config("frame side must be at least 32".into()));
        }
        if self.frames < 4 {
            return Err(Error::Config("sequences need at least 4 frames".into()));
        }
        if !(self.min_size >= 2.0 && self.min_size <= self.max_size) {
            return Err(Error::Config("need 2 <= min_size <= max_size".into()));
        }
        // the target may grow to 1.4× its initial size and must keep a margin
        if self.max_size * 1.4 + 4.0 >= side {
            return Err(Error::Config("object larger than frame".into()));
        }
        if self.max_speed < 0.0 || !(0.0..0.5).contains(&self.max_scale_step) || self.noise < 0.0 {
            return Err(Error::Config("motion/scale/noise ranges out of bounds".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub seq_id: String,
    pub seed: u64,
    pub frames: Vec<Image>,
    pub gt_boxes: Vec<BoxF>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Texture {
    base: [f64; 3],
    accent: [f64; 3],
    /// Stripe periods in units of the box side.
    fx: f64,
    fy: f64,
    phase: f64,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut col = || [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        let base = col();
        let accent = col();
        Texture {
            base,
            accent,
            fx: rng.gen_range(1.0..3.0),
            fy: rng.gen_range(1.0..3.0),
            phase: rng.gen_range(0.0..1.0),
        }
    }

    /// Color at normalized box coordinates `(u, v) ∈ [0,1]²`.
    fn color(&self, u: f64, v: f64, c: usize) -> f64 {
        let s = libm::sin(core::f64::consts::TAU * (u * self.fx + self.phase))
            * libm::sin(core::f64::consts::TAU * (v * self.fy + 0.5 * self.phase));
        let t = 0.5 + 0.5 * s;
        self.base[c] * (1.0 - t) + self.accent[c] * t
    }
}

struct Mover {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    w: f64,
    h: f64,
    log_scale: f64,
    texture: Texture,
}

impl Mover {
    fn boxf(&self) -> BoxF {
        let s = libm::exp(self.log_scale);
        BoxF::from_center(self.cx, self.cy, self.w * s, self.h * s)
    }

    fn advance(&mut self, spec: &SceneSpec, rng: &mut ChaCha8Rng) {
        if spec.max_speed > 0.0 {
            let jitter = 0.35 * spec.max_speed;
            self.vx += rng.gen_range(-jitter..=jitter);
            self.vy += rng.gen_range(-jitter..=jitter);
            let speed = libm::sqrt(self.vx * self.vx + self.vy * self.vy);
            if speed > spec.max_speed {
                self.vx *= spec.max_speed / speed;
                self.vy *= spec.max_speed / speed;
            }
        } else {
            self.vx = 0.0;
            self.vy = 0.0;
        }
        if spec.max_scale_step > 0.0 {
            let step = libm::log(1.0 + spec.max_scale_step);
            self.log_scale = (self.log_scale + rng.gen_range(-step..=step)).clamp(libm::log(0.7), libm::log(1.4));
        }
        let s = libm::exp(self.log_scale);
        let (hw, hh) = (self.w * s / 2.0, self.h * s / 2.0);
        let margin = 1.0;
        let (lo_x, hi_x) = (hw + margin, spec.width as f64 - hw - margin);
        let (lo_y, hi_y) = (hh + margin, spec.height as f64 - hh - margin);
        self.cx += self.vx;
        self.cy += self.vy;
        if self.cx < lo_x || self.cx > hi_x {
            self.vx = -self.vx;
            self.cx = self.cx.clamp(lo_x, hi_x);
        }
        if self.cy < lo_y || self.cy > hi_y {
            self.vy = -self.vy;
            self.cy = self.cy.clamp(lo_y, hi_y);
        }
    }
}

fn spawn(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Mover {
    let w = rng.gen_range(spec.min_size..=spec.max_size);
    let h = (w * rng.gen_range(0.7..1.4)).clamp(spec.min_size, spec.max_size);
    let m = 1.4 * w.max(h) / 2.0 + 2.0;
    let angle = rng.gen_range(0.0..core::f64::consts::TAU);
    let speed = rng.gen_range(0.3..=1.0) * spec.max_speed;
    Mover {
        cx: rng.gen_range(m..spec.width as f64 - m),
        cy: rng.gen_range(m..spec.height as f64 - m),
        vx: speed * libm::cos(angle),
        vy: speed * libm::sin(angle),
        w,
        h,
        log_scale: 0.0,
        texture: Texture::random(rng),
    }
}

/// Fraction of the unit interval `[p, p+1]` covered by `[lo, hi]`.
fn coverage(p: f64, lo: f64, hi: f64) -> f64 {
    (hi.min(p + 1.0) - lo.max(p)).clamp(0.0, 1.0)
}

fn paint(img: &mut Image, b: &BoxF, tex: &Texture) {
    let x0 = libm::floor(b.x1).max(0.0) as usize;
    let y0 = libm::floor(b.y1).max(0.0) as usize;
    let x1 = (libm::ceil(b.x2) as usize).min(img.width);
    let y1 = (libm::ceil(b.y2) as usize).min(img.height);
    for y in y0..y1 {
        let cy = coverage(y as f64, b.y1, b.y2);
        let v = ((y as f64 + 0.5 - b.y1) / b.height()).clamp(0.0, 1.0);
        for x in x0..x1 {
            let a = cy * coverage(x as f64, b.x1, b.x2);
            if a <= 0.0 {
                continue;
            }
            let u = ((x as f64 + 0.5 - b.x1) / b.width()).clamp(0.0, 1.0);
            for c in 0..img.channels {
                let idx = (c * img.height + y) * img.width + x;
                img.data[idx] = (1.0 - a) * img.data[idx] + a * tex.color(u, v, c);
            }
        }
    }
}

fn background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::new(3, spec.height, spec.width);
    let base: [f64; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            (
                rng.gen_range(-0.15..0.15),
                rng.gen_range(-0.15..0.15),
                rng.gen_range(0.0..core::f64::consts::TAU),
                [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)],
            )
        })
        .collect();
    for y in 0..spec.height {
        for x in 0..spec.width {
            for (c, b) in base.iter().enumerate() {
                let mut v = *b;
                for (kx, ky, ph, amp) in &waves {
                    v += amp[c] * libm::sin(kx * x as f64 + ky * y as f64 + ph);
                }
                img.data[(c * spec.height + y) * spec.width + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    // static clutter
    for _ in 0..6 {
        let w = rng.gen_range(4.0..spec.max_size);
        let h = rng.gen_range(4.0..spec.max_size);
        let cx = rng.gen_range(0.0..spec.width as f64);
        let cy = rng.gen_range(0.0..spec.height as f64);
        let mut tex = Texture::random(rng);
        tex.accent = tex.base;
        paint(&mut img, &BoxF::from_center(cx, cy, w, h), &tex);
    }
    img
}

/// Renders one sequence; `(spec, seed)` fully determines the output.
pub fn generate_sequence(spec: &SceneSpec, seed: u64) -> Result<SyntheticSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = background(spec, &mut rng);
    let mut target = spawn(spec, &mut rng);
    let mut distractors: Vec<Mover> = (0..spec.n_distractors)
        .map(|_| {
            let mut d = spawn(spec, &mut rng);
            // similar size and palette, different pattern
            d.w = (target.w * rng.gen_range(0.8..1.25)).clamp(spec.min_size, spec.max_size);
            d.h = (target.h * rng.gen_range(0.8..1.25)).clamp(spec.min_size, spec.max_size);
            d.texture.base = target.texture.base;
            d
        })
        .collect();
    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt_boxes = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        if t > 0 {
            target.advance(spec, &mut rng);
            for d in &mut distractors {
                d.advance(spec, &mut rng);
            }
        }
        let mut img = bg.clone();
        for d in &distractors {
            paint(&mut img, &d.boxf(), &d.texture);
        }
        let gt = target.boxf();
        paint(&mut img, &gt, &target.texture);
        if spec.noise > 0.0 {
            for v in &mut img.data {
                // sum of uniforms, roughly gaussian
                let n: f64 = (0..3).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>();
                *v = (*v + spec.noise * n).clamp(0.0, 1.0);
            }
        }
        frames.push(img);
        gt_boxes.push(gt);
    }
    Ok(SyntheticSequence { seq_id: alloc::format!("syn-{seed:08x}"), seed, frames, gt_boxes })
}

/// Checks the invariants every generated sequence must satisfy.
pub fn check_sequence(seq: &SyntheticSequence) -> Result<()> {
    if seq.frames.len() < 4 || seq.frames.len() != seq.gt_boxes.len() {
        return Err(Error::Contract("sequence needs ≥ 4 frames with one box each".into()));
    }
    for (img, b) in seq.frames.iter().zip(&seq.gt_boxes) {
        let inside = b.x1 > 0.0 && b.y1 > 0.0 && b.x2 < img.width as f64 && b.y2 < img.height as f64;
        if !inside || b.area() < 4.0 || !b.is_valid() {
            return Err(Error::Contract(alloc::format!("bad ground-truth box {b:?}")));
        }
        if img.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("pixel outside [0,1]".into()));
        }
    }
    Ok(())
}

/// Context-padded crop side for a target of size `w × h`.
pub fn context_side(w: f64, h: f64) -> f64 {
    let p = 0.5 * (w + h);
    libm::sqrt((w + p) * (h + p))
}

/// A resampled square crop plus the map from frame to patch pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: Image,
    pub frame_to_patch: Affine,
}

impl Patch {
    pub fn to_frame(&self, b: &BoxF) -> BoxF {
        self.frame_to_patch.inverse().apply(b)
    }

    pub fn to_patch(&self, b: &BoxF) -> BoxF {
        self.frame_to_patch.apply(b)
    }
}

/// Crops a `side × side` frame region centered at `center`, resampled to
/// `size × size` bilinearly; out-of-frame samples take the channel mean.
pub fn crop_patch(frame: &Image, center: (f64, f64), size: usize, side: f64) -> Patch {
    let side = side.max(1e-6);
    let scale = size as f64 / side;
    let x0 = center.0 - side / 2.0;
    let y0 = center.1 - side / 2.0;
    let means = frame.channel_means();
    let mut out = Image::new(frame.channels, size, size);
    let (fw, fh) = (frame.width as f64, frame.height as f64);
    for v in 0..size {
        // pixel centers, then back to sample-index space
        let sy = (v as f64 + 0.5) / scale + y0 - 0.5;
        for u in 0..size {
            let sx = (u as f64 + 0.5) / scale + x0 - 0.5;
            let inside = sx >= -0.5 && sy >= -0.5 && sx <= fw - 0.5 && sy <= fh - 0.5;
            for c in 0..frame.channels {
                let val = if inside { bilinear(frame, c, sx, sy) } else { means[c] };
                out.data[(c * size + v) * size + u] = val;
            }
        }
    }
    Patch { image: out, frame_to_patch: Affine { scale, ox: -x0 * scale, oy: -y0 * scale } }
}

fn bilinear(img: &Image, c: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (img.width - 1) as f64);
    let y = y.clamp(0.0, (img.height - 1) as f64);
    let xf = libm::floor(x);
    let yf = libm::floor(y);
    let (ix, iy) = (xf as usize, yf as usize);
    let (ax, ay) = (x - xf, y - yf);
    let ix1 = (ix + 1).min(img.width - 1);
    let iy1 = (iy + 1).min(img.height - 1);
    let p00 = img.at(c, iy, ix);
    if ax == 0.0 && ay == 0.0 {
        return p00;
    }
    let p01 = img.at(c, iy, ix1);
    let p10 = img.at(c, iy1, ix);
    let p11 = img.at(c, iy1, ix1);
    (1.0 - ay) * ((1.0 - ax) * p00 + ax * p01) + ay * ((1.0 - ax) * p10 + ax * p11)
}

/// Draws the four jitter factors, each uniform in `(−level/2, level/2)`.
pub fn jitter_factors(level: f64, rng: &mut impl Rng) -> [f64; 4] {
    if level <= 0.0 {
        return [0.0; 4];
    }
    let h = 0.5 * level;
    [rng.gen_range(-h..h), rng.gen_range(-h..h), rng.gen_range(-h..h), rng.gen_range(-h..h)]
}

/// Center/size jitter of a box, clamped into `bounds` (width, height) with
/// sides of at least 2 px.
pub fn jitter_box(b: &BoxF, level: f64, seed: u64, bounds: (f64, f64)) -> Result<BoxF> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::Range(alloc::format!("jitter level {level} outside [0,1]")));
    }
    if level == 0.0 {
        return Ok(*b);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = jitter_factors(level, &mut rng);
    Ok(apply_jitter(b, s, bounds))
}

pub fn apply_jitter(b: &BoxF, s: [f64; 4], bounds: (f64, f64)) -> BoxF {
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    let j = BoxF::from_center(cx + s[0] * w, cy + s[1] * h, (1.0 + s[2]) * w, (1.0 + s[3]) * h);
    clamp_box(&j, bounds, 2.0)
}

/// Clamps a box into `[0, W] × [0, H]`, keeping each side at least `min_side`.
pub fn clamp_box(b: &BoxF, bounds: (f64, f64), min_side: f64) -> BoxF {
    let fit = |lo: f64, hi: f64, limit: f64| {
        let lo = lo.clamp(0.0, limit - min_side);
        let hi = hi.clamp(lo + min_side, limit);
        (lo, hi)
    };
    let (x1, x2) = fit(b.x1, b.x2, bounds.0);
    let (y1, y2) = fit(b.y1, b.y2, bounds.1);
    BoxF::new(x1, y1, x2, y2)
}

/// Noisy first-frame box plus per-frame target centers.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub first_box: BoxF,
    pub centers: Vec<(f64, f64)>,
    pub center_only: bool,
    pub noise_level: f64,
}

impl PseudoLabel {
    pub fn from_sequence(seq: &SyntheticSequence, level: f64, seed: u64) -> Result<Self> {
        let f = &seq.frames[0];
        let first_box = jitter_box(&seq.gt_boxes[0], level, seed, (f.width as f64, f.height as f64))?;
        Ok(PseudoLabel {
            first_box,
            centers: seq.gt_boxes.iter().map(|b| b.center()).collect(),
            center_only: true,
            noise_level: level,
        })
    }
}

/// One training cycle: template frame, palindromic search frames, and the
/// pseudo label. Ground truth rides along for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleSample {
    pub template_frame: Image,
    /// Search frames in visiting order, e.g. frames 2,3,4,3,2.
    pub search_frames: Vec<Image>,
    /// Frame indices of `search_frames` followed by the template index.
    pub visit_order: Vec<usize>,
    /// Pseudo centers aligned with `search_frames`.
    pub search_centers: Vec<(f64, f64)>,
    pub pseudo_label: PseudoLabel,
    pub gt_boxes: Vec<BoxF>,
}

/// Template-plus-search frame indices, spaced `gap` apart from frame 0.
pub fn cycle_indices(n_frames: usize, n_search: usize, gap: usize) -> Result<Vec<usize>> {
    if n_search == 0 || gap == 0 {
        return Err(Error::Range("n_search and gap must be positive".into()));
    }
    if 1 + n_search * gap > n_frames {
        return Err(Error::Range(alloc::format!(
            "{n_search} search frames with gap {gap} need {} frames, have {n_frames}",
            1 + n_search * gap
        )));
    }
    Ok((0..=n_search).map(|i| i * gap).collect())
}

/// Forward then backward over the search frames, then back to the template.
pub fn palindrome_order(indices: &[usize]) -> Vec<usize> {
    let search = &indices[1..];
    let mut order: Vec<usize> = search.to_vec();
    order.extend(search.iter().rev().skip(1));
    order.push(indices[0]);
    order
}

pub fn sample_palindrome(
    seq: &SyntheticSequence,
    n_search: usize,
    gap: usize,
    jitter_level: f64,
    seed: u64,
) -> Result<CycleSample> {
    let idx = cycle_indices(seq.frames.len(), n_search, gap)?;
    let visit_order = palindrome_order(&idx);
    let pseudo_label = PseudoLabel::from_sequence(seq, jitter_level, seed)?;
    let searches = &visit_order[..visit_order.len() - 1];
    Ok(CycleSample {
        template_frame: seq.frames[idx[0]].clone(),
        search_frames: searches.iter().map(|&i| seq.frames[i].clone()).collect(),
        search_centers: searches.iter().map(|&i| pseudo_label.centers[i]).collect(),
        visit_order,
        pseudo_label,
        gt_boxes: seq.gt_boxes.clone(),
    })
}
