//! Boundary F-scores with distance-tolerant matching.
//!
//! A boundary pixel is one whose 4-neighbourhood holds a different value.
//! Matching uses an exact squared Euclidean distance transform (separable
//! lower-envelope algorithm), so a pixel matches when some boundary pixel of
//! the other map lies within the threshold, with no chamfer approximation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative threshold used for Cityscapes-sized images (about 3 px there).
pub const CITYSCAPES_RELATIVE_THRESHOLD: f64 = 0.00088;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Threshold {
    /// Absolute distance in pixels.
    Pixels(f64),
    /// Fraction of the image diagonal.
    Relative(f64),
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Relative(CITYSCAPES_RELATIVE_THRESHOLD)
    }
}

impl Threshold {
    pub fn pixels(self, h: usize, w: usize) -> f64 {
        match self {
            Threshold::Pixels(p) => p,
            Threshold::Relative(r) => r * ((h * h + w * w) as f64).sqrt(),
        }
    }
}

fn check(map: &[u8], h: usize, w: usize) -> Result<()> {
    if map.len() != h * w {
        return Err(Error::Data(format!("{} values for a {h}×{w} map", map.len())));
    }
    Ok(())
}

/// Boundary pixels of `map`. With `class = Some(c)` only pixels of class `c`
/// count.
pub fn boundary_mask(map: &[u8], h: usize, w: usize, class: Option<u8>) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = map[y * w + x];
            if class.is_some_and(|c| c != v) {
                continue;
            }
            let differs = |yy: usize, xx: usize| map[yy * w + xx] != v;
            out[y * w + x] = (y > 0 && differs(y - 1, x))
                || (y + 1 < h && differs(y + 1, x))
                || (x > 0 && differs(y, x - 1))
                || (x + 1 < w && differs(y, x + 1));
        }
    }
    out
}

const FAR: f64 = 1e30;

/// 1-D squared distance transform of `f` (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            // z[0] is -inf, so this never pops the last parabola.
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel
/// of `mask`; `None` when the mask is empty.
pub fn edt_squared(mask: &[bool], h: usize, w: usize) -> Option<Vec<f64>> {
    if !mask.iter().any(|&m| m) {
        return None;
    }
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0f64; n + 1]);
    let mut f = vec![0f64; n];
    let mut col_out = vec![0f64; n];
    let mut grid: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { FAR }).collect();
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut col_out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut col_out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&col_out[..w]);
    }
    Some(grid)
}

/// Number of `from` pixels that have a `to` pixel within `t` pixels.
fn matched(from: &[bool], to: &[bool], h: usize, w: usize, t: f64) -> usize {
    let Some(d2) = edt_squared(to, h, w) else { return 0 };
    let t2 = t * t;
    from.iter().zip(&d2).filter(|(&f, &d)| f && d <= t2).count()
}

/// O(n²) pairwise version of the matching count, for testing.
pub fn brute_force_match(from: &[bool], to: &[bool], w: usize, t: f64) -> usize {
    let pts = |m: &[bool]| -> Vec<(i64, i64)> {
        m.iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| ((i / w) as i64, (i % w) as i64))
            .collect()
    };
    let (a, b) = (pts(from), pts(to));
    a.iter()
        .filter(|&&(y, x)| {
            b.iter().any(|&(yy, xx)| (((y - yy).pow(2) + (x - xx).pow(2)) as f64) <= t * t)
        })
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Precision/recall/F of two boundary sets. Two empty sets score 1; one
/// empty set against a non-empty one scores 0.
fn score(pred: &[bool], label: &[bool], h: usize, w: usize, t: f64) -> BoundaryScore {
    let np = pred.iter().filter(|&&b| b).count();
    let nl = label.iter().filter(|&&b| b).count();
    if np == 0 && nl == 0 {
        return BoundaryScore {
            precision: 1.0,
            recall: 1.0,
            f: 1.0,
        };
    }
    if np == 0 || nl == 0 {
        return BoundaryScore {
            precision: if np == 0 { 1.0 } else { 0.0 },
            recall: if nl == 0 { 1.0 } else { 0.0 },
            f: 0.0,
        };
    }
    let precision = matched(pred, label, h, w, t) as f64 / np as f64;
    let recall = matched(label, pred, h, w, t) as f64 / nl as f64;
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    BoundaryScore { precision, recall, f }
}

/// Per-class boundary F for every class present in either map (others are
/// `None`), and their mean. A class found in only one map scores 0.
pub fn boundary_fscore(
    pred: &[u8],
    label: &[u8],
    h: usize,
    w: usize,
    num_classes: usize,
    threshold: Threshold,
) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    check(pred, h, w)?;
    check(label, h, w)?;
    let t = threshold.pixels(h, w);
    let per: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let c = c as u8;
            let (in_pred, in_label) = (pred.contains(&c), label.contains(&c));
            if in_pred != in_label {
                // The class exists on one side only: nothing can match.
                return Some(0.0);
            }
            in_pred.then(|| {
                score(
                    &boundary_mask(pred, h, w, Some(c)),
                    &boundary_mask(label, h, w, Some(c)),
                    h,
                    w,
                    t,
                )
                .f
            })
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok((per, mean))
}

/// F-score of the merged contours of all classes, independent of which
/// class sits on either side.
pub fn imagewise_fscore(pred: &[u8], label: &[u8], h: usize, w: usize, threshold: Threshold) -> Result<BoundaryScore> {
    check(pred, h, w)?;
    check(label, h, w)?;
    Ok(score(
        &boundary_mask(pred, h, w, None),
        &boundary_mask(label, h, w, None),
        h,
        w,
        threshold.pixels(h, w),
    ))
}
