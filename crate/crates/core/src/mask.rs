//! Differentiable region mask.
//!
//! Each candidate box is rasterized onto a fixed grid as per-cell overlap
//! fractions. Where several boxes overlap a cell only the highest-scoring box
//! keeps its value; the survivors are weighted by their scores and summed
//! into a single-channel mask. The overlap fraction is piecewise bilinear in
//! the box corners, so gradients reach both the box coordinates and the
//! scores.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract_err, shape_err, Result};
use crate::geometry::BoxF;
use crate::tape::{CustomOp, Tape, Var};
use crate::tensor::Tensor;

/// `rows × cols` grid of square cells of side `cell`, origin at `(0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub cell: f64,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, cell: f64) -> Self {
        GridSpec { rows, cols, cell }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn cell_box(&self, i: usize, j: usize) -> BoxF {
        let c = self.cell;
        BoxF::new(j as f64 * c, i as f64 * c, (j + 1) as f64 * c, (i + 1) as f64 * c)
    }

    /// Half-open index range of cells along one axis touched by `[lo, hi]`.
    fn span(&self, lo: f64, hi: f64, n: usize) -> (usize, usize) {
        let a = libm::floor(lo / self.cell).max(0.0) as usize;
        let b = (libm::ceil(hi / self.cell).max(0.0) as usize).min(n);
        (a.min(n), b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    /// `rows × cols` values in `[0, 1]`.
    pub grid: Tensor,
    pub threshold_used: f64,
    /// Contributing box per cell, if any.
    pub provenance: Vec<Option<usize>>,
}

impl RegionMask {
    pub fn values(&self) -> &[f64] {
        self.grid.data()
    }

    pub fn total(&self) -> f64 {
        self.grid.sum()
    }

    /// Number of cells whose value is at least `level`.
    pub fn count_at_least(&self, level: f64) -> usize {
        self.grid.data().iter().filter(|v| **v >= level).count()
    }
}

/// Overlap of one axis: `max(0, min(hi, chi) − max(lo, clo))` plus the
/// derivatives w.r.t. `lo` and `hi`; ties select the box coordinate.
#[inline]
fn axis_overlap(lo: f64, hi: f64, clo: f64, chi: f64) -> (f64, f64, f64) {
    let (a, da) = if lo >= clo { (lo, -1.0) } else { (clo, 0.0) };
    let (b, db) = if hi <= chi { (hi, 1.0) } else { (chi, 0.0) };
    let len = b - a;
    if len > 0.0 {
        (len, da, db)
    } else {
        (0.0, 0.0, 0.0)
    }
}

fn check_box(b: &BoxF) -> Result<()> {
    if !b.is_valid() {
        return Err(contract_err!("degenerate box {:?}", b));
    }
    Ok(())
}

/// Fraction of each grid cell covered by `b`.
pub fn grid_overlap(b: &BoxF, grid: &GridSpec) -> Result<Vec<f64>> {
    check_box(b)?;
    let area = grid.cell * grid.cell;
    let mut out = vec![0.0; grid.len()];
    let (r0, r1) = grid.span(b.y1, b.y2, grid.rows);
    let (c0, c1) = grid.span(b.x1, b.x2, grid.cols);
    for i in r0..r1 {
        for j in c0..c1 {
            let c = grid.cell_box(i, j);
            let (ix, _, _) = axis_overlap(b.x1, b.x2, c.x1, c.x2);
            let (iy, _, _) = axis_overlap(b.y1, b.y2, c.y1, c.y2);
            out[i * grid.cols + j] = ix * iy / area;
        }
    }
    Ok(out)
}

/// Per cell, keeps the value of the highest-scoring box among those with a
/// positive value there (lowest index on ties) and zeroes the rest.
pub fn suppress_duplicates(maps: &[Vec<f64>], scores: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Option<usize>>)> {
    if maps.len() != scores.len() {
        return Err(contract_err!("{} maps but {} scores", maps.len(), scores.len()));
    }
    let n = maps.first().map_or(0, |m| m.len());
    if maps.iter().any(|m| m.len() != n) {
        return Err(shape_err!("grid maps differ in size"));
    }
    let mut winner: Vec<Option<usize>> = vec![None; n];
    for (k, m) in maps.iter().enumerate() {
        for (cell, v) in m.iter().enumerate() {
            if *v > 0.0 && winner[cell].map_or(true, |w| scores[k] > scores[w]) {
                winner[cell] = Some(k);
            }
        }
    }
    let kept = maps
        .iter()
        .enumerate()
        .map(|(k, m)| m.iter().enumerate().map(|(cell, v)| if winner[cell] == Some(k) { *v } else { 0.0 }).collect())
        .collect();
    Ok((kept, winner))
}

/// `M = Σ_k 1(s_k ≥ th) · s_k · G̃_k` over already suppressed maps.
pub fn aggregate_mask(maps: &[Vec<f64>], scores: &[f64], th: f64, grid: &GridSpec) -> Result<RegionMask> {
    if maps.len() != scores.len() {
        return Err(contract_err!("{} maps but {} scores", maps.len(), scores.len()));
    }
    let mut values = vec![0.0; grid.len()];
    let mut provenance = vec![None; grid.len()];
    for (k, (m, &s)) in maps.iter().zip(scores).enumerate() {
        if m.len() != grid.len() {
            return Err(shape_err!("map of {} cells on a {}-cell grid", m.len(), grid.len()));
        }
        if s < th {
            continue;
        }
        for (cell, g) in m.iter().enumerate() {
            if *g > 0.0 {
                values[cell] += s * g;
                provenance[cell] = Some(k);
            }
        }
    }
    Ok(RegionMask { grid: Tensor::new(&[grid.rows, grid.cols], values)?, threshold_used: th, provenance })
}

/// Mask of a single box with unit score.
pub fn mask_from_single_box(b: &BoxF, grid: &GridSpec) -> Result<RegionMask> {
    let g = grid_overlap(b, grid)?;
    let (kept, _) = suppress_duplicates(&[g], &[1.0])?;
    aggregate_mask(&kept, &[1.0], 0.0, grid)
}

/// Value-level region mask of `K` boxes with scores.
pub fn region_mask_values(boxes: &[BoxF], scores: &[f64], th: f64, grid: &GridSpec) -> Result<RegionMask> {
    if boxes.len() != scores.len() {
        return Err(contract_err!("{} boxes but {} scores", boxes.len(), scores.len()));
    }
    let (winners, overlap) = winners(boxes, scores, grid)?;
    let mut values = vec![0.0; grid.len()];
    let mut provenance = vec![None; grid.len()];
    for cell in 0..grid.len() {
        if let Some(k) = winners[cell] {
            if scores[k] >= th {
                values[cell] = scores[k] * overlap[cell];
                provenance[cell] = Some(k);
            }
        }
    }
    Ok(RegionMask { grid: Tensor::new(&[grid.rows, grid.cols], values)?, threshold_used: th, provenance })
}

/// Winning box per cell and its overlap fraction, without materializing
/// all `K` dense maps.
fn winners(boxes: &[BoxF], scores: &[f64], grid: &GridSpec) -> Result<(Vec<Option<usize>>, Vec<f64>)> {
    let area = grid.cell * grid.cell;
    let mut win: Vec<Option<usize>> = vec![None; grid.len()];
    let mut val = vec![0.0; grid.len()];
    for (k, b) in boxes.iter().enumerate() {
        check_box(b)?;
        let (r0, r1) = grid.span(b.y1, b.y2, grid.rows);
        let (c0, c1) = grid.span(b.x1, b.x2, grid.cols);
        for i in r0..r1 {
            for j in c0..c1 {
                let cell = i * grid.cols + j;
                if win[cell].map_or(false, |w| scores[k] <= scores[w]) {
                    continue;
                }
                let c = grid.cell_box(i, j);
                let (ix, _, _) = axis_overlap(b.x1, b.x2, c.x1, c.x2);
                let (iy, _, _) = axis_overlap(b.y1, b.y2, c.y1, c.y2);
                let g = ix * iy / area;
                if g > 0.0 {
                    win[cell] = Some(k);
                    val[cell] = g;
                }
            }
        }
    }
    Ok((win, val))
}

struct RegionMaskOp {
    grid: GridSpec,
    /// Winning box per cell after thresholding.
    provenance: Vec<Option<usize>>,
    detach_boxes: bool,
}

impl CustomOp for RegionMaskOp {
    fn name(&self) -> &'static str {
        "region_mask"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let boxes = inputs[0].data();
        let scores = inputs[1].data();
        let area = self.grid.cell * self.grid.cell;
        let mut dbox = vec![0.0; boxes.len()];
        let mut dscore = vec![0.0; scores.len()];
        for i in 0..self.grid.rows {
            for j in 0..self.grid.cols {
                let cell = i * self.grid.cols + j;
                let Some(k) = self.provenance[cell] else {
                    continue;
                };
                let gc = g[cell];
                if gc == 0.0 {
                    continue;
                }
                let b = &boxes[k * 4..k * 4 + 4];
                let c = self.grid.cell_box(i, j);
                let (ix, dx1, dx2) = axis_overlap(b[0], b[2], c.x1, c.x2);
                let (iy, dy1, dy2) = axis_overlap(b[1], b[3], c.y1, c.y2);
                let s = scores[k];
                dscore[k] += gc * ix * iy / area;
                if !self.detach_boxes {
                    let f = gc * s / area;
                    dbox[k * 4] += f * dx1 * iy;
                    dbox[k * 4 + 2] += f * dx2 * iy;
                    dbox[k * 4 + 1] += f * dy1 * ix;
                    dbox[k * 4 + 3] += f * dy2 * ix;
                }
            }
        }
        vec![if self.detach_boxes { None } else { Some(dbox) }, Some(dscore)]
    }
}

/// Records the region mask of `boxes[K×4]` and `scores[K]` on the tape.
///
/// With `detach_boxes` the mask still depends on the scores but passes no
/// gradient to the box coordinates.
pub fn region_mask(
    tape: &mut Tape,
    boxes: Var,
    scores: Var,
    grid: &GridSpec,
    th: f64,
    detach_boxes: bool,
) -> Result<(Var, RegionMask)> {
    let k = tape.shape(scores).iter().product::<usize>();
    if tape.shape(boxes) != [k, 4] {
        return Err(shape_err!("region_mask: boxes {:?} with {} scores", tape.shape(boxes), k));
    }
    let bx: Vec<BoxF> = tape.value(boxes).data().chunks(4).map(|c| BoxF::new(c[0], c[1], c[2], c[3])).collect();
    let sc = tape.value(scores).data().to_vec();
    let mask = region_mask_values(&bx, &sc, th, grid)?;
    let op = RegionMaskOp { grid: *grid, provenance: mask.provenance.clone(), detach_boxes };
    let var = tape.custom(&[boxes, scores], mask.grid.clone(), Box::new(op));
    Ok((var, mask))
}

/// Plain-text matrix: one row per line, values with 4 decimals.
pub fn format_matrix(t: &Tensor) -> String {
    let cols = *t.shape().last().unwrap_or(&1);
    let mut s = String::new();
    for row in t.data().chunks(cols.max(1)) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}
