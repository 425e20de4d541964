//! Whole-to-part masks built by chaining top-down attention weights down the
//! stage ladder, and their rendering.
//!
//! A top-down record of stage `ℓ` says, for every stage-`ℓ` location, how
//! strongly each lower pixel of its window is assigned to it. Multiplying
//! these assignments level by level and summing over the intermediate
//! locations gives the assignment of one coarse location to pixels two or
//! three stages down. Rows are re-scaled to sum to one at the end.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::StageTrace;
use crate::error::{contract, Result};
use crate::interlevel::{Direction, InterLevelWeights};
use crate::tensor::par::map_indices;
use crate::tensor::{PatchGeometry, Scalar, Tensor};

/// A sparse `[source locations, target pixels]` assignment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyMask {
    pub source_stage: usize,
    pub target_stage: usize,
    pub source_hw: (usize, usize),
    pub target_hw: (usize, usize),
    /// `(target index, weight)` pairs per source row, sorted by index.
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Row sums of the raw product. Normalised rows are `raw / mass`.
    pub mass: Vec<f64>,
    pub normalized: bool,
    /// Patch geometries from the source level downwards.
    pub levels: Vec<PatchGeometry>,
}

impl HierarchyMask {
    /// Every pixel assigned to itself; the zero-level base of a chain.
    pub fn identity(stage: usize, h: usize, w: usize) -> Self {
        Self {
            source_stage: stage,
            target_stage: stage,
            source_hw: (h, w),
            target_hw: (h, w),
            rows: (0..h * w).map(|i| vec![(i, 1.0)]).collect(),
            mass: vec![1.0; h * w],
            normalized: true,
            levels: Vec::new(),
        }
    }

    /// One-level mask of a stage-`stage` top-down record.
    pub fn from_top_down<T: Scalar>(weights: &InterLevelWeights<T>, stage: usize, batch: usize) -> Result<Self> {
        if stage < 2 {
            return Err(contract("top-down weights start at stage 2"));
        }
        let (h, w) = weights.lo_hw;
        compose(weights, stage, batch, &Self::identity(stage - 1, h, w))
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Raw (unnormalised) weights of row `i`.
    pub fn raw_row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let s = if self.normalized { self.mass[i] } else { 1.0 };
        self.rows[i].iter().map(move |&(t, v)| (t, v * s))
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|r| r.1).sum()
    }

    /// Copy with every row scaled to sum to one. Rows without mass stay zero.
    pub fn normalize(&self) -> Self {
        if self.normalized {
            return self.clone();
        }
        let rows = self
            .rows
            .iter()
            .zip(&self.mass)
            .map(|(r, &m)| r.iter().map(|&(t, v)| (t, if m > 0.0 { v / m } else { 0.0 })).collect())
            .collect();
        Self { rows, normalized: true, ..self.clone() }
    }

    /// Analytic receptive window of source location `(y, x)` in target
    /// coordinates: `(top, left, side)`. May extend past the grid.
    pub fn window(&self, y: usize, x: usize) -> (isize, isize, usize) {
        let (mut oy, mut ox, mut side) = (y as isize, x as isize, 1usize);
        for g in &self.levels {
            oy = oy * g.stride as isize - g.padding as isize;
            ox = ox * g.stride as isize - g.padding as isize;
            side = g.kernel + (side - 1) * g.stride;
        }
        (oy, ox, side)
    }

    /// Dense `[source, target]` matrix, e.g. for export.
    pub fn dense(&self) -> Tensor<f64> {
        let tn = self.target_hw.0 * self.target_hw.1;
        let mut out = Tensor::zeros(&[self.rows.len(), tn]);
        let d = out.data_mut();
        for (i, r) in self.rows.iter().enumerate() {
            for &(t, v) in r {
                d[i * tn + t] = v;
            }
        }
        out
    }
}

/// `M̄[src, tgt] ∝ Σ_mid upper[src, mid] · lower[mid, tgt]`, with `upper`
/// the stage-`upper_stage` top-down record of image `batch`. The raw
/// weights of `lower` are used whatever its flag, and the result is
/// normalised.
pub fn compose<T: Scalar>(
    upper: &InterLevelWeights<T>,
    upper_stage: usize,
    batch: usize,
    lower: &HierarchyMask,
) -> Result<HierarchyMask> {
    if upper.direction != Direction::TopDown {
        return Err(contract("hierarchies are built from top-down weights"));
    }
    if upper_stage != lower.source_stage + 1 {
        return Err(contract(format!(
            "stage {upper_stage} weights cannot be stacked on a mask from stage {}",
            lower.source_stage
        )));
    }
    if upper.lo_hw != lower.source_hw {
        return Err(contract(format!(
            "stage {upper_stage} weights cover a {:?} grid but the lower mask starts from {:?}",
            upper.lo_hw, lower.source_hw
        )));
    }
    let [b, l, s] = match upper.m.shape()[..] {
        [b, l, s] => [b, l, s],
        _ => return Err(contract("weight record must be [B, L, slots]")),
    };
    if batch >= b {
        return Err(contract(format!("image {batch} of a batch of {b}")));
    }
    let geom = upper.geometry;
    let (ht, wt) = upper.hi_hw;
    let (h, w) = upper.lo_hw;
    let k = geom.kernel;
    let m = &upper.m.data()[batch * l * s..(batch + 1) * l * s];
    let rows: Vec<(Vec<(usize, f64)>, f64)> = map_indices(ht * wt, l * s * 16, |src| {
        let (i, j) = (src / wt, src % wt);
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for a in 0..k {
            let Some(y) = geom.tap(i, a, h) else { continue };
            for c in 0..k {
                let Some(x) = geom.tap(j, c, w) else { continue };
                let wgt = m[src * s + a * k + c].as_f64();
                if wgt == 0.0 {
                    continue;
                }
                for (t, v) in lower.raw_row(y * w + x) {
                    *acc.entry(t).or_insert(0.0) += wgt * v;
                }
            }
        }
        let row: Vec<(usize, f64)> = acc.into_iter().filter(|e| e.1 != 0.0).collect();
        let mass = row.iter().map(|e| e.1).sum::<f64>();
        (row, mass)
    });
    let (rows, mass): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let mut levels = vec![geom];
    levels.extend_from_slice(&lower.levels);
    let raw = HierarchyMask {
        source_stage: upper_stage,
        target_stage: lower.target_stage,
        source_hw: upper.hi_hw,
        target_hw: lower.target_hw,
        rows,
        mass,
        normalized: false,
        levels,
    };
    Ok(raw.normalize())
}

/// Side of the window `source` levels reach down to `target`:
/// `w₀ = 1, w_{n+1} = k + (w_n − 1)·s`.
pub fn receptive_window(source_stage: usize, target_stage: usize, g: PatchGeometry) -> usize {
    let levels = source_stage.saturating_sub(target_stage);
    (0..levels).fold(1, |w, _| g.kernel + (w - 1) * g.stride)
}

/// The 1-, 2-, ... `levels`-level masks rooted at `source_stage` for image
/// `batch`, from the last top-down record of each stage.
pub fn hierarchy_masks<T: Scalar>(
    trace: &[StageTrace<T>],
    source_stage: usize,
    levels: usize,
    batch: usize,
) -> Result<Vec<HierarchyMask>> {
    if levels == 0 || levels >= source_stage {
        return Err(contract(format!(
            "{levels} levels below stage {source_stage} are not available"
        )));
    }
    let record = |stage: usize| -> Result<&InterLevelWeights<T>> {
        trace
            .iter()
            .find(|t| t.stage == stage)
            .and_then(|t| t.last_top_down.as_ref())
            .ok_or_else(|| contract(format!("stage {stage} has no top-down weights")))
    };
    // Check every stage first so the error names the missing one.
    for n in 0..levels {
        record(source_stage - n)?;
    }
    let mut out = Vec::with_capacity(levels);
    for n in 1..=levels {
        let bottom = source_stage - n;
        let lo = record(bottom + 1)?.lo_hw;
        let mut mask = HierarchyMask::identity(bottom, lo.0, lo.1);
        for stage in bottom + 1..=source_stage {
            mask = compose(record(stage)?, stage, batch, &mask)?;
        }
        out.push(mask);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Opacity of the mask tint at full intensity.
    pub alpha: f32,
    /// Outline the analytic receptive window.
    pub draw_window: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { alpha: 0.7, draw_window: true }
    }
}

pub const MASK_TINT: [f32; 3] = [1.0, 0.85, 0.1];
pub const WINDOW_COLOR: [f32; 3] = [1.0, 0.0, 0.0];

/// Luma replicated into three channels.
pub fn to_grayscale(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    if image.rank() != 3 || image.shape()[2] != 3 {
        return Err(contract(format!("expected an [H, W, 3] image, got {:?}", image.shape())));
    }
    let mut out = image.clone();
    for px in out.data_mut().chunks_mut(3) {
        let y = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        px.fill(y);
    }
    Ok(out)
}

/// Blends the row of `query` over `base` (`[H, W, 3]`, usually grayscale).
/// The row is max-normalised; target cells are stretched over the image by
/// nearest neighbour.
pub fn render_mask(
    mask: &HierarchyMask,
    query: (usize, usize),
    base: &Tensor<f32>,
    opts: &RenderOptions,
) -> Result<Tensor<f32>> {
    let (sh, sw) = mask.source_hw;
    if query.0 >= sh || query.1 >= sw {
        return Err(contract(format!("query {query:?} outside the {sh}×{sw} source grid")));
    }
    if base.rank() != 3 || base.shape()[2] != 3 {
        return Err(contract(format!("expected an [H, W, 3] image, got {:?}", base.shape())));
    }
    let (ih, iw) = (base.shape()[0], base.shape()[1]);
    let (th, tw) = mask.target_hw;
    if ih < th || iw < tw {
        return Err(contract(format!("a {ih}×{iw} image cannot show a {th}×{tw} mask")));
    }
    let mut cells = vec![0f64; th * tw];
    for (t, v) in &mask.rows[query.0 * sw + query.1] {
        cells[*t] = *v;
    }
    let peak = cells.iter().copied().fold(0.0, f64::max);
    let mut out = base.clone();
    let d = out.data_mut();
    for y in 0..ih {
        for x in 0..iw {
            let v = cells[(y * th / ih) * tw + x * tw / iw];
            let a = if peak > 0.0 { opts.alpha * (v / peak) as f32 } else { 0.0 };
            if a == 0.0 {
                continue;
            }
            let o = (y * iw + x) * 3;
            for c in 0..3 {
                d[o + c] = (1.0 - a) * d[o + c] + a * MASK_TINT[c];
            }
        }
    }
    if opts.draw_window {
        let (oy, ox, side) = mask.window(query.0, query.1);
        // Window rows and columns in image pixels, clipped.
        let span = |o: isize, t: usize, i: usize| -> Option<(usize, usize)> {
            let lo = o.max(0) as usize;
            let hi = (o + side as isize).min(t as isize);
            (hi > lo as isize).then(|| (lo * i / t, (hi as usize * i / t).saturating_sub(1)))
        };
        if let (Some((y0, y1)), Some((x0, x1))) = (span(oy, th, ih), span(ox, tw, iw)) {
            let mut paint = |y: usize, x: usize| d[(y * iw + x) * 3..(y * iw + x) * 3 + 3].copy_from_slice(&WINDOW_COLOR);
            for x in x0..=x1 {
                paint(y0, x);
                paint(y1, x);
            }
            for y in y0..=y1 {
                paint(y, x0);
                paint(y, x1);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
