//! Inter-level attention between adjacent stages.
//!
//! Geometry: a coarse ("higher") location `(i, j)` owns the `k×k` window of
//! fine ("lower") pixels starting at `(s·i − p, s·j − p)`. Under the default
//! `k=4, s=2, p=1` every coarse location sees 16 fine slots and every fine
//! pixel lies in one to four windows.
//!
//! * Bottom-up: each coarse feature attends over the 16 fine features of its
//!   window.
//! * Top-down: each fine feature attends over the coarse features whose
//!   windows cover it. The efficient path never materialises the per-pixel
//!   cover sets: it scores every (window, slot) pair, folds the exponentials
//!   onto the fine grid to get each pixel's denominator, unfolds it back and
//!   divides. Windows slots that fall in the padding have no pixel, so their
//!   folded denominator is zero; it is replaced by one and the slot itself is
//!   masked to zero.
//!
//! Attention is single-head with inner width `d = min(d_hi, d_lo)`, scaled by
//! `1/√d`, plus a learned bias per window slot.

mod naive;

use crate::autograd::{Graph, Init, ParamId, ParamStore, Var};
use crate::error::{contract, Result};
use crate::layers::{Conv2d, LayerNorm, Linear};
use crate::tensor::{PatchGeometry, Scalar, Tensor};

pub use naive::top_down_attention_naive;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    BottomUp,
    TopDown,
}

/// Parameters of one inter-level attention layer.
#[derive(Debug, Clone)]
pub struct InterLevelAttnParams {
    pub direction: Direction,
    /// Query projection from the updated side.
    pub q: Linear,
    /// Key and value projections from the other side.
    pub k: Linear,
    pub v: Linear,
    /// Output projection back to the updated side. Zero-initialised.
    pub f: Linear,
    /// One additive logit bias per window slot.
    pub bias_table: ParamId,
    pub ln_hi: LayerNorm,
    pub ln_lo: LayerNorm,
    pub geometry: PatchGeometry,
    pub d: usize,
    pub d_hi: usize,
    pub d_lo: usize,
}

impl InterLevelAttnParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        direction: Direction,
        d_hi: usize,
        d_lo: usize,
        geometry: PatchGeometry,
    ) -> Result<Self> {
        let d = d_hi.min(d_lo);
        let (dq, dkv) = match direction {
            Direction::BottomUp => (d_hi, d_lo),
            Direction::TopDown => (d_lo, d_hi),
        };
        Ok(Self {
            direction,
            q: Linear::new(store, &format!("{name}.q"), dq, d)?,
            k: Linear::new(store, &format!("{name}.k"), dkv, d)?,
            v: Linear::new(store, &format!("{name}.v"), dkv, d)?,
            f: Linear::with_init(store, &format!("{name}.f"), d, dq, Init::Zeros)?,
            bias_table: store.init(&format!("{name}.bias_table"), &[geometry.slots()], Init::Zeros)?,
            ln_hi: LayerNorm::new(store, &format!("{name}.ln_hi"), d_hi)?,
            ln_lo: LayerNorm::new(store, &format!("{name}.ln_lo"), d_lo)?,
            geometry,
            d,
            d_hi,
            d_lo,
        })
    }

    pub fn num_params(&self) -> usize {
        self.q.num_params()
            + self.k.num_params()
            + self.v.num_params()
            + self.f.num_params()
            + self.geometry.slots()
            + self.ln_hi.num_params()
            + self.ln_lo.num_params()
    }
}

/// `α·x + β·MLP(GELU(DWConv3×3(MLP(LN x))))`.
#[derive(Debug, Clone)]
pub struct MixFfnParams {
    pub ln: LayerNorm,
    pub fc1: Linear,
    pub dw: Conv2d,
    pub fc2: Linear,
    pub d: usize,
    pub expansion: usize,
}

impl MixFfnParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, expansion: usize) -> Result<Self> {
        if expansion == 0 {
            return Err(contract("Mix-FFN expansion must be at least 1"));
        }
        let hidden = d * expansion;
        Ok(Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), d)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden)?,
            dw: Conv2d::new(store, &format!("{name}.dw"), hidden, hidden, 3, 1, 1, true)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d)?,
            d,
            expansion,
        })
    }

    pub fn num_params(&self) -> usize {
        self.ln.num_params() + self.fc1.num_params() + self.dw.num_params() + self.fc2.num_params()
    }
}

/// Normalised attention weights of one inter-level layer, laid out per
/// window: `m[b, i·Wt + j, slot]`.
#[derive(Debug, Clone)]
pub struct InterLevelWeights<T> {
    pub m: Tensor<T>,
    pub direction: Direction,
    pub geometry: PatchGeometry,
    pub hi_hw: (usize, usize),
    pub lo_hw: (usize, usize),
}

impl<T: Scalar> InterLevelWeights<T> {
    /// Per-window sums of the weights, `[B, Ht·Wt]`.
    pub fn row_sums(&self) -> Tensor<T> {
        let s = self.geometry.slots();
        let lead = self.m.shape()[..2].to_vec();
        let sums = self.m.data().chunks(s).map(|r| r.iter().copied().sum()).collect();
        Tensor::new(lead, sums).expect("row count")
    }

    /// Weights summed onto the fine grid, `[B, H_lo, W_lo, 1]`.
    pub fn fold_to_lower(&self) -> Result<Tensor<T>> {
        let [b, l, s] = match self.m.shape()[..] {
            [b, l, s] => [b, l, s],
            _ => return Err(contract("weight record must be [B, L, slots]")),
        };
        let patches = self.m.clone().reshape(&[b, l, s, 1])?;
        Ok(crate::tensor::fold(&patches, self.lo_hw.0, self.lo_hw.1, &self.geometry)?)
    }
}

/// Validates a (higher, lower) pair and returns `[b, ht, wt, h, w]`.
fn check_pair<T: Scalar>(
    g: &Graph<'_, T>,
    x_hi: Var,
    x_lo: Var,
    p: &InterLevelAttnParams,
) -> Result<[usize; 5]> {
    let hi = g.value(x_hi).dims4("inter-level attention")?;
    let lo = g.value(x_lo).dims4("inter-level attention")?;
    check_shapes(hi, lo, p)
}

pub(crate) fn check_shapes(hi: [usize; 4], lo: [usize; 4], p: &InterLevelAttnParams) -> Result<[usize; 5]> {
    let [b, ht, wt, dh] = hi;
    let [b2, h, w, dl] = lo;
    if b != b2 || dh != p.d_hi || dl != p.d_lo {
        return Err(contract(format!(
            "inter-level shapes {hi:?} / {lo:?} do not match dims {} / {}",
            p.d_hi, p.d_lo
        )));
    }
    let (eh, ew) = (p.geometry.windows(h)?, p.geometry.windows(w)?);
    if (eh, ew) != (ht, wt) {
        return Err(contract(format!(
            "a {h}×{w} lower map has {eh}×{ew} windows but the higher map is {ht}×{wt}"
        )));
    }
    Ok([b, ht, wt, h, w])
}

/// Validity mask over `[Ht·Wt, slots]`, as `0/1` values repeated per batch.
fn slot_mask_tensor<T: Scalar>(geom: &PatchGeometry, b: usize, h: usize, w: usize) -> Result<(Vec<bool>, Tensor<T>)> {
    let mask = geom.slot_mask(h, w)?;
    let n = mask.len();
    let t = Tensor::from_fn(&[b * n / geom.slots(), geom.slots()], |i| {
        if mask[i % n] {
            T::one()
        } else {
            T::zero()
        }
    });
    Ok((mask, t))
}

fn scaled_logits<T: Scalar>(g: &Graph<'_, T>, raw: Var, rows: usize, p: &InterLevelAttnParams) -> Result<Var> {
    let raw = g.reshape(raw, &[rows, p.geometry.slots()])?;
    let scaled = g.scale(raw, T::one() / T::of(p.d as f64).sqrt());
    g.add_bias(scaled, g.param(p.bias_table)?)
}

/// Bottom-up inter-level attention: `x_hi + f(Σ_slot w·v(x_lo_slot))` with
/// the weights a softmax over each window's real slots.
pub fn bottom_up_attention<T: Scalar>(
    g: &Graph<'_, T>,
    x_hi: Var,
    x_lo: Var,
    p: &InterLevelAttnParams,
) -> Result<(Var, InterLevelWeights<T>)> {
    if p.direction != Direction::BottomUp {
        return Err(contract("bottom_up_attention needs bottom-up parameters"));
    }
    let [b, ht, wt, h, w] = check_pair(g, x_hi, x_lo, p)?;
    let (geom, d, s) = (p.geometry, p.d, p.geometry.slots());
    let rows = b * ht * wt;
    let hi_n = p.ln_hi.apply(g, x_hi)?;
    let lo_n = p.ln_lo.apply(g, x_lo)?;
    let q = p.q.apply(g, hi_n)?;
    let k = p.k.apply(g, lo_n)?;
    let v = p.v.apply(g, lo_n)?;
    let ku = g.unfold(k, geom)?;
    let ku = g.reshape(ku, &[rows, s, d])?;
    let vu = g.unfold(v, geom)?;
    let vu = g.reshape(vu, &[rows, s, d])?;
    let q = g.reshape(q, &[rows, d, 1])?;
    let raw = g.matmul(ku, q)?;
    let logits = scaled_logits(g, raw, rows, p)?;
    let mask = geom.slot_mask(h, w)?;
    let wts = g.softmax_masked(logits, &mask)?;
    let w3 = g.reshape(wts, &[rows, 1, s])?;
    let out = g.matmul(w3, vu)?;
    let out = g.reshape(out, &[b, ht, wt, d])?;
    let out = p.f.apply(g, out)?;
    let y = g.add(x_hi, out)?;
    let record = InterLevelWeights {
        m: (*g.value(wts)).clone().reshape(&[b, ht * wt, s])?,
        direction: Direction::BottomUp,
        geometry: geom,
        hi_hw: (ht, wt),
        lo_hw: (h, w),
    };
    Ok((y, record))
}

/// For every (window, slot) the maximum logit over all real slots that read
/// the same fine pixel. Padding slots get zero.
fn covering_max<T: Scalar>(logits: &[T], b: usize, ht: usize, wt: usize, h: usize, w: usize, geom: &PatchGeometry) -> Vec<T> {
    let k = geom.kernel;
    let s = geom.slots();
    let mut best = vec![T::neg_infinity(); b * h * w];
    let mut out = vec![T::zero(); logits.len()];
    for pass in 0..2 {
        for bi in 0..b {
            for i in 0..ht {
                for j in 0..wt {
                    let row = ((bi * ht + i) * wt + j) * s;
                    for a in 0..k {
                        let Some(y) = geom.tap(i, a, h) else { continue };
                        for c in 0..k {
                            let Some(x) = geom.tap(j, c, w) else { continue };
                            let px = (bi * h + y) * w + x;
                            let slot = row + a * k + c;
                            if pass == 0 {
                                best[px] = best[px].max(logits[slot]);
                            } else {
                                out[slot] = best[px];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Top-down inter-level attention computed window-wise with folded
/// denominators. Equals [`top_down_attention_naive`] up to rounding.
pub fn top_down_attention_efficient<T: Scalar>(
    g: &Graph<'_, T>,
    x_lo: Var,
    x_hi: Var,
    p: &InterLevelAttnParams,
) -> Result<(Var, InterLevelWeights<T>)> {
    if p.direction != Direction::TopDown {
        return Err(contract("top_down_attention needs top-down parameters"));
    }
    let [b, ht, wt, h, w] = check_pair(g, x_hi, x_lo, p)?;
    let (geom, d, s) = (p.geometry, p.d, p.geometry.slots());
    let rows = b * ht * wt;
    let lo_n = p.ln_lo.apply(g, x_lo)?;
    let hi_n = p.ln_hi.apply(g, x_hi)?;
    let q = p.q.apply(g, lo_n)?;
    let k = p.k.apply(g, hi_n)?;
    let v = p.v.apply(g, hi_n)?;
    let qu = g.unfold(q, geom)?;
    let qu = g.reshape(qu, &[rows, s, d])?;
    let k = g.reshape(k, &[rows, d, 1])?;
    let raw = g.matmul(qu, k)?;
    let logits = scaled_logits(g, raw, rows, p)?;

    // Softmax is shift-invariant per fine pixel, so subtracting the largest
    // logit among a pixel's covering slots changes nothing but keeps exp
    // bounded by one. The shift is a constant for differentiation.
    let shift = covering_max(g.value(logits).data(), b, ht, wt, h, w, &geom);
    let shift = g.constant(Tensor::new(vec![rows, s], shift)?);
    let (_, mask) = slot_mask_tensor::<T>(&geom, b, h, w)?;
    let mask = g.constant(mask);
    let centred = g.sub(logits, shift)?;
    let e = g.exp(centred);
    let e = g.mul(e, mask)?;

    let e4 = g.reshape(e, &[b, ht * wt, s, 1])?;
    let per_pixel = g.fold(e4, h, w, geom)?;
    let denom = g.unfold(per_pixel, geom)?;
    let denom = g.reshape(denom, &[rows, s])?;
    let denom = g.guard_zero_to_one(denom);
    let wts = g.div(e, denom)?;

    let w3 = g.reshape(wts, &[rows, s, 1])?;
    let v3 = g.reshape(v, &[rows, 1, d])?;
    let mv = g.matmul(w3, v3)?;
    let mv = g.reshape(mv, &[b, ht * wt, s, d])?;
    let out = g.fold(mv, h, w, geom)?;
    let out = p.f.apply(g, out)?;
    let y = g.add(x_lo, out)?;
    let record = InterLevelWeights {
        m: (*g.value(wts)).clone().reshape(&[b, ht * wt, s])?,
        direction: Direction::TopDown,
        geometry: geom,
        hi_hw: (ht, wt),
        lo_hw: (h, w),
    };
    Ok((y, record))
}

/// `α·x + β·FFN(x)` with the Mix-FFN inner path.
pub fn mix_ffn<T: Scalar>(g: &Graph<'_, T>, x: Var, p: &MixFfnParams, alpha: f64, beta: f64) -> Result<Var> {
    let h = p.ln.apply(g, x)?;
    let h = p.fc1.apply(g, h)?;
    let h = p.dw.apply(g, h)?;
    let h = g.gelu(h);
    let h = p.fc2.apply(g, h)?;
    let a = g.scale(x, T::of(alpha));
    let bh = g.scale(h, T::of(beta));
    g.add(a, bh)
}

/// Bottom-up update: inter-level attention, Mix-FFN blend, then the stage's
/// own self-attention block `block`.
#[allow(clippy::too_many_arguments)]
pub fn bottom_up_update<T: Scalar>(
    g: &Graph<'_, T>,
    x_hi: Var,
    x_lo: Var,
    attn: &InterLevelAttnParams,
    ffn: &MixFfnParams,
    alpha: f64,
    beta: f64,
    block: impl FnOnce(Var) -> Result<Var>,
) -> Result<(Var, InterLevelWeights<T>)> {
    let (x1, wts) = bottom_up_attention(g, x_hi, x_lo, attn)?;
    let x2 = mix_ffn(g, x1, ffn, alpha, beta)?;
    Ok((block(x2)?, wts))
}

/// Top-down update: inter-level attention into the lower map, Mix-FFN
/// blend, then the dedicated lower-level block `block`.
#[allow(clippy::too_many_arguments)]
pub fn top_down_update<T: Scalar>(
    g: &Graph<'_, T>,
    x_lo: Var,
    x_hi: Var,
    attn: &InterLevelAttnParams,
    ffn: &MixFfnParams,
    alpha: f64,
    beta: f64,
    block: impl FnOnce(Var) -> Result<Var>,
) -> Result<(Var, InterLevelWeights<T>)> {
    let (x1, wts) = top_down_attention_efficient(g, x_lo, x_hi, attn)?;
    let x2 = mix_ffn(g, x1, ffn, alpha, beta)?;
    Ok((block(x2)?, wts))
}
