//! Executable invariant suites. The `check` command runs all of them; tests
//! call the measuring functions directly and apply their own tolerances.

use std::time::Instant;

use serde::Serialize;

use crate::autograd::{finite_diff_grad, max_rel_error, rel_error, Graph, ParamId, ParamStore, Var};
use crate::encoder::{
    block_schedule, segmentation_loss, sra_attention, BlockRole, Model, ModelConfig, SraBlockParams,
};
use crate::error::{contract, Result};
use crate::hierarchy::hierarchy_masks;
use crate::interlevel::{
    bottom_up_update, top_down_attention_efficient, top_down_attention_naive, top_down_update, Direction,
    InterLevelAttnParams, MixFfnParams,
};
use crate::metrics::{attention_dot_reduction, flops_sra, model_flops};
use crate::rng::Rng;
use crate::tensor::{
    bilinear_resize, bilinear_resize_backward, conv2d, conv2d_backward, count_macs, fold, unfold, PatchGeometry,
    Scalar, Tensor,
};

pub fn randn<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.normal()))
}

/// Overwrites every parameter with Gaussian noise so that no branch is
/// trivially zero. Matrices and kernels get `std / √fan_in` to keep
/// activations near unit scale; vectors get `std`, and norm gains are drawn
/// around one.
pub fn randomize_params<T: Scalar>(store: &mut ParamStore<T>, seed: u64, std: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let mut r = Rng::derive(seed, store.name(id));
        let gain = store.name(id).ends_with("gamma");
        let shape = store.get(id).shape().to_vec();
        let fan_in: usize = shape[..shape.len().saturating_sub(1)].iter().product();
        let scale = if shape.len() >= 2 { std / (fan_in as f64).sqrt() } else { std };
        let t = Tensor::from_fn(&shape, |_| {
            let z = r.normal() * scale;
            T::of(if gain { 1.0 + z } else { z })
        });
        store.set(id, t).expect("same shape");
    }
}

fn td_layer<T: Scalar>(d_hi: usize, d_lo: usize, seed: u64) -> Result<(ParamStore<T>, InterLevelAttnParams)> {
    let mut store = ParamStore::new(seed);
    let p = InterLevelAttnParams::new(&mut store, "td", Direction::TopDown, d_hi, d_lo, PatchGeometry::default())?;
    randomize_params(&mut store, seed, 1.0);
    Ok((store, p))
}

fn efficient<T: Scalar>(
    store: &ParamStore<T>,
    p: &InterLevelAttnParams,
    lo: &Tensor<T>,
    hi: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = Graph::inference(store);
    let (y, w) = top_down_attention_efficient(&g, g.constant(lo.clone()), g.constant(hi.clone()), p)?;
    Ok(((*g.value(y)).clone(), w.m))
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleStats {
    pub configs: usize,
    pub max_diff_f64: f64,
    pub max_diff_f32: f64,
}

/// Efficient against naive top-down attention on `n` random layers with
/// lower maps up to 8×12, `d_lo ∈ {4, 8}` and `d_hi ∈ {8, 16}`. Differences
/// cover both outputs and weights.
pub fn oracle_equivalence(seed: u64, n: usize) -> Result<OracleStats> {
    let mut r = Rng::derive(seed, "oracle");
    let (mut m64, mut m32) = (0f64, 0f64);
    for i in 0..n {
        let h = 2 * (1 + r.below(4) as usize);
        let w = 2 * (1 + r.below(6) as usize);
        let d_lo = [4, 8][r.below(2) as usize];
        let d_hi = [8, 16][r.below(2) as usize];
        let b = 1 + r.below(2) as usize;
        let (store, p) = td_layer::<f64>(d_hi, d_lo, seed.wrapping_add(i as u64))?;
        let lo = randn::<f64>(&[b, h, w, d_lo], &mut r);
        let hi = randn::<f64>(&[b, h / 2, w / 2, d_hi], &mut r);
        let (yn, wn) = top_down_attention_naive(&store, &lo, &hi, &p)?;
        let (ye, we) = efficient(&store, &p, &lo, &hi)?;
        m64 = m64.max(ye.max_abs_diff(&yn)?).max(we.max_abs_diff(&wn.m)?);

        let s32 = store.cast::<f32>();
        let (lo32, hi32) = (lo.cast::<f32>(), hi.cast::<f32>());
        let (yn, wn) = top_down_attention_naive(&s32, &lo32, &hi32, &p)?;
        let (ye, we) = efficient(&s32, &p, &lo32, &hi32)?;
        m32 = m32.max(ye.max_abs_diff(&yn)? as f64).max(we.max_abs_diff(&wn.m)? as f64);
    }
    Ok(OracleStats { configs: n, max_diff_f64: m64, max_diff_f32: m32 })
}

#[derive(Debug, Clone, Serialize)]
pub struct NormStats {
    /// Largest `|row sum − 1|` of the bottom-up weights.
    pub bottom_up_rows: f64,
    /// Largest `|folded weight − 1|` over covered lower pixels.
    pub top_down_fold: f64,
    /// Largest `|row sum − 1|` of the normalised hierarchy masks.
    pub hierarchy_rows: f64,
    /// Window side of each available mask level, shallowest first.
    pub window_sides: Vec<usize>,
    /// Mask entries outside their analytic window.
    pub support_violations: usize,
    pub stages_checked: usize,
}

/// Runs a randomised `cfg` model on a 64×64 batch and measures the weight
/// normalisations of every inter-level layer and the composed masks.
pub fn normalization(cfg: &ModelConfig, seed: u64) -> Result<NormStats> {
    let (model, mut store) = Model::init::<f64>(cfg, seed)?;
    randomize_params(&mut store, seed, 1.0);
    let mut r = Rng::derive(seed, "normalization");
    let g = Graph::inference(&store);
    let img = g.constant(randn(&[2, 64, 64, cfg.input_channels], &mut r));
    let trace = model.forward_encoder(&g, img)?.trace;
    let mut st = NormStats {
        bottom_up_rows: 0.0,
        top_down_fold: 0.0,
        hierarchy_rows: 0.0,
        window_sides: Vec::new(),
        support_violations: 0,
        stages_checked: 0,
    };
    for t in &trace {
        if let Some(bu) = &t.last_bottom_up {
            st.stages_checked += 1;
            for s in bu.row_sums().data() {
                st.bottom_up_rows = st.bottom_up_rows.max((s - 1.0).abs());
            }
        }
        if let Some(td) = &t.last_top_down {
            // Every lower pixel is covered by at least one window under the
            // default geometry.
            for v in td.fold_to_lower()?.data() {
                st.top_down_fold = st.top_down_fold.max((v - 1.0).abs());
            }
        }
    }
    // Deepest chain of top-down records ending at the top stage.
    let top = trace.len();
    let levels = (0..top - 1).take_while(|n| trace[top - 1 - n].last_top_down.is_some()).count();
    if levels > 0 {
        for batch in 0..2 {
            let masks = hierarchy_masks(&trace, top, levels, batch)?;
            st.window_sides = masks.iter().map(|m| m.window(0, 0).2).collect();
            for m in &masks {
                let (sh, sw) = m.source_hw;
                let tw = m.target_hw.1;
                for y in 0..sh {
                    for x in 0..sw {
                        let i = y * sw + x;
                        st.hierarchy_rows = st.hierarchy_rows.max((m.row_sum(i) - 1.0).abs());
                        let (oy, ox, side) = m.window(y, x);
                        let side = side as isize;
                        st.support_violations += m.rows[i]
                            .iter()
                            .filter(|&&(t, _)| {
                                let (ty, tx) = ((t / tw) as isize, (t % tw) as isize);
                                ty < oy || ty >= oy + side || tx < ox || tx >= ox + side
                            })
                            .count();
                    }
                }
            }
        }
    }
    Ok(st)
}

/// Largest relative gap `|⟨Ax, y⟩ − ⟨x, Aᵀy⟩| / max(|⟨Ax, y⟩|, 1)` over
/// unfold/fold, bilinear resizing and convolution.
pub fn adjointness(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut r = Rng::derive(seed, "adjoint");
    let gap = |a: f64, b: f64| (a - b).abs() / a.abs().max(1.0);
    let mut out = Vec::new();
    for geom in [PatchGeometry::default(), PatchGeometry::for_patch(6)?, PatchGeometry::for_patch(2)?] {
        let x = randn::<f64>(&[2, 6, 8, 3], &mut r);
        let u = unfold(&x, &geom)?;
        let y = randn::<f64>(u.shape(), &mut r);
        out.push(("unfold/fold", gap(u.dot(&y)?, x.dot(&fold(&y, 6, 8, &geom)?)?)));
    }
    let x = randn::<f64>(&[2, 3, 5, 2], &mut r);
    let y = randn::<f64>(&[2, 7, 4, 2], &mut r);
    out.push(("bilinear", gap(bilinear_resize(&x, 7, 4)?.dot(&y)?, x.dot(&bilinear_resize_backward(&y, 3, 5)?)?)));
    for (depthwise, cin, cout) in [(false, 3, 4), (true, 3, 3)] {
        let x = randn::<f64>(&[2, 7, 6, cin], &mut r);
        let w = randn::<f64>(&[3, 3, if depthwise { 1 } else { cin }, cout], &mut r);
        let zero = Tensor::zeros(&[cout]);
        let cx = conv2d(&x, &w, &zero, 2, 1, depthwise)?;
        let y = randn::<f64>(cx.shape(), &mut r);
        let back = conv2d_backward(&y, &x, &w, 2, 1, depthwise)?.input;
        out.push((if depthwise { "depthwise conv" } else { "conv" }, gap(cx.dot(&y)?, x.dot(&back)?)));
    }
    Ok(out)
}

/// Central-difference check of `d(Σ op(x) ⊙ w)/dx` for a random `x`.
fn op_error(shape: &[usize], r: &mut Rng, op: &dyn Fn(&Graph<'_, f64>, Var) -> Result<Var>) -> Result<f64> {
    let x0 = randn::<f64>(shape, r);
    let out_shape = {
        let g = Graph::<f64>::detached();
        let x = g.leaf(x0.clone(), false);
        g.shape(op(&g, x)?)
    };
    let wv = randn::<f64>(&out_shape, r);
    let eval = |x: &Tensor<f64>| -> Result<(f64, Option<Tensor<f64>>)> {
        let g = Graph::<f64>::detached();
        let xv = g.leaf(x.clone(), true);
        let y = op(&g, xv)?;
        let s = g.mul(y, g.constant(wv.clone()))?;
        let s = g.sum(s);
        Ok((g.value(s).item(), g.backward(s)?.wrt(xv).cloned()))
    };
    let analytic = eval(&x0)?.1.unwrap_or_else(|| Tensor::zeros(shape));
    let numeric = finite_diff_grad(|x| eval(x).map(|v| v.0).unwrap_or(f64::NAN), &x0, 1e-5);
    Ok(max_rel_error(&analytic, &numeric))
}

/// Per-op gradient errors in float64.
pub fn op_gradients(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut r = Rng::derive(seed, "op-gradients");
    let c = randn::<f64>(&[2, 3, 4], &mut r);
    let m = randn::<f64>(&[4, 5], &mut r);
    let gamma = randn::<f64>(&[4], &mut r).map(|v| 1.0 + 0.3 * v);
    let beta = randn::<f64>(&[4], &mut r);
    let xln = randn::<f64>(&[3, 4], &mut r);
    let wconv = randn::<f64>(&[3, 3, 2, 3], &mut r);
    let wdw = randn::<f64>(&[3, 3, 1, 2], &mut r);
    let bias3 = randn::<f64>(&[3], &mut r);
    let xconv = randn::<f64>(&[2, 5, 4, 2], &mut r);
    let geom = PatchGeometry::default();
    type Op = Box<dyn Fn(&Graph<'_, f64>, Var) -> Result<Var>>;
    let cases: Vec<(&'static str, Vec<usize>, Op)> = vec![
        ("matmul lhs", vec![2, 3, 4], Box::new(move |g, x| g.matmul(x, g.constant(m.clone())))),
        ("matmul rhs", vec![4, 2], Box::new({
            let c = c.clone();
            move |g, x| g.matmul(g.constant(c.clone()), x)
        })),
        ("softmax", vec![3, 5], Box::new(|g, x| Ok(g.softmax(x)))),
        ("layer_norm x", vec![3, 4], Box::new({
            let (ga, be) = (gamma.clone(), beta.clone());
            move |g, x| g.layer_norm(x, g.constant(ga.clone()), g.constant(be.clone()))
        })),
        ("layer_norm gamma", vec![4], Box::new({
            let (xl, be) = (xln.clone(), beta.clone());
            move |g, ga| g.layer_norm(g.constant(xl.clone()), ga, g.constant(be.clone()))
        })),
        ("layer_norm beta", vec![4], Box::new({
            let (xl, ga) = (xln.clone(), gamma.clone());
            move |g, be| g.layer_norm(g.constant(xl.clone()), g.constant(ga.clone()), be)
        })),
        ("gelu", vec![2, 5], Box::new(|g, x| Ok(g.gelu(x)))),
        ("conv2d x", vec![2, 5, 4, 2], Box::new({
            let (w, b) = (wconv.clone(), bias3.clone());
            move |g, x| g.conv2d(x, g.constant(w.clone()), g.constant(b.clone()), 2, 1, false)
        })),
        ("conv2d w", vec![3, 3, 2, 3], Box::new({
            let (x, b) = (xconv.clone(), bias3.clone());
            move |g, w| g.conv2d(g.constant(x.clone()), w, g.constant(b.clone()), 1, 1, false)
        })),
        ("conv2d b", vec![3], Box::new({
            let (x, w) = (xconv.clone(), wconv.clone());
            move |g, b| g.conv2d(g.constant(x.clone()), g.constant(w.clone()), b, 2, 0, false)
        })),
        ("depthwise conv2d", vec![1, 4, 4, 2], Box::new({
            let w = wdw.clone();
            move |g, x| g.conv2d(x, g.constant(w.clone()), g.constant(Tensor::zeros(&[2])), 1, 1, true)
        })),
        ("unfold", vec![1, 4, 6, 2], Box::new(move |g, x| g.unfold(x, geom))),
        ("fold", vec![1, 6, 16, 2], Box::new(move |g, p| g.fold(p, 4, 6, geom))),
        ("bilinear up", vec![1, 3, 2, 2], Box::new(|g, x| g.bilinear(x, 5, 7))),
        ("bilinear down", vec![1, 5, 4, 2], Box::new(|g, x| g.bilinear(x, 2, 3))),
        ("add", vec![2, 3, 4], Box::new({
            let c = c.clone();
            move |g, x| g.add(x, g.constant(c.clone()))
        })),
        ("mul", vec![2, 3, 4], Box::new({
            let c = c.clone();
            move |g, x| g.mul(x, g.constant(c.clone()))
        })),
        ("mul self", vec![2, 3], Box::new(|g, x| g.mul(x, x))),
        ("scale", vec![2, 3], Box::new(|g, x| Ok(g.scale(x, 0.7)))),
    ];
    cases
        .iter()
        .map(|(name, shape, op)| Ok((*name, op_error(shape, &mut r, op.as_ref())?)))
        .collect()
}

struct HilaPair {
    store: ParamStore<f64>,
    bu: InterLevelAttnParams,
    td: InterLevelAttnParams,
    bu_ffn: MixFfnParams,
    td_ffn: MixFfnParams,
    hi_block: SraBlockParams,
    td_block: SraBlockParams,
}

fn hila_pair(seed: u64) -> Result<HilaPair> {
    let (d_hi, d_lo) = (8, 4);
    let mut store = ParamStore::new(seed);
    let geom = PatchGeometry::default();
    let pair = HilaPair {
        bu: InterLevelAttnParams::new(&mut store, "bu", Direction::BottomUp, d_hi, d_lo, geom)?,
        td: InterLevelAttnParams::new(&mut store, "td", Direction::TopDown, d_hi, d_lo, geom)?,
        bu_ffn: MixFfnParams::new(&mut store, "bu_ffn", d_hi, 2)?,
        td_ffn: MixFfnParams::new(&mut store, "td_ffn", d_lo, 2)?,
        hi_block: SraBlockParams::new(&mut store, "hi_block", d_hi, 2, 1, 2)?,
        td_block: SraBlockParams::new(&mut store, "td_block", d_lo, 1, 2, 2)?,
        store: ParamStore::new(seed),
    };
    randomize_params(&mut store, seed, 1.0);
    Ok(HilaPair { store, ..pair })
}

/// A full HILA step: top-down update of the lower map, then bottom-up update
/// of the higher map, reduced to a weighted sum of both outputs.
fn hila_loss(
    p: &HilaPair,
    store: &ParamStore<f64>,
    lo: &Tensor<f64>,
    hi: &Tensor<f64>,
    wl: &Tensor<f64>,
    wh: &Tensor<f64>,
    want: &[ParamId],
) -> Result<(f64, Vec<Tensor<f64>>)> {
    use crate::encoder::sra_block;
    let g = Graph::new(store);
    let (xl, xh) = (g.leaf(lo.clone(), true), g.leaf(hi.clone(), true));
    let (lo2, _) = top_down_update(&g, xl, xh, &p.td, &p.td_ffn, 0.5, 0.5, |y| sra_block(&g, y, &p.td_block))?;
    let (hi2, _) = bottom_up_update(&g, xh, lo2, &p.bu, &p.bu_ffn, 0.5, 0.5, |y| sra_block(&g, y, &p.hi_block))?;
    let a = g.mul(lo2, g.constant(wl.clone()))?;
    let b = g.mul(hi2, g.constant(wh.clone()))?;
    let loss = g.add(g.sum(a), g.sum(b))?;
    let grads = g.backward(loss)?;
    let mut out = vec![grads.wrt(xl).cloned().unwrap_or_else(|| Tensor::zeros(lo.shape()))];
    out.push(grads.wrt(xh).cloned().unwrap_or_else(|| Tensor::zeros(hi.shape())));
    for &id in want {
        out.push(grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape())));
    }
    Ok((g.value(loss).item(), out))
}

/// Largest relative gradient error of a composed HILA step, over both inputs
/// and a handful of whole parameter tensors.
pub fn hila_block_gradient(seed: u64) -> Result<f64> {
    let p = hila_pair(seed)?;
    let mut r = Rng::derive(seed, "hila-block");
    let lo = randn::<f64>(&[1, 4, 4, 4], &mut r);
    let hi = randn::<f64>(&[1, 2, 2, 8], &mut r);
    let wl = randn::<f64>(lo.shape(), &mut r);
    let wh = randn::<f64>(hi.shape(), &mut r);
    let want = [p.td.q.w, p.td.bias_table, p.td.f.w, p.bu.k.w, p.bu.bias_table, p.td_ffn.dw.w, p.td_block.q.w];
    let (_, an) = hila_loss(&p, &p.store, &lo, &hi, &wl, &wh, &want)?;
    let f = |s: &ParamStore<f64>, l: &Tensor<f64>, h: &Tensor<f64>| {
        hila_loss(&p, s, l, h, &wl, &wh, &[]).map(|v| v.0).unwrap_or(f64::NAN)
    };
    let mut worst = max_rel_error(&an[0], &finite_diff_grad(|t| f(&p.store, t, &hi), &lo, 1e-5));
    worst = worst.max(max_rel_error(&an[1], &finite_diff_grad(|t| f(&p.store, &lo, t), &hi, 1e-5)));
    for (k, &id) in want.iter().enumerate() {
        let num = finite_diff_grad(
            |t| {
                let mut s = p.store.clone();
                s.set(id, t.clone()).expect("same shape");
                f(&s, &lo, &hi)
            },
            p.store.get(id),
            1e-5,
        );
        worst = worst.max(max_rel_error(&an[k + 2], &num));
    }
    Ok(worst)
}

/// Relative gradient error of the full model's segmentation loss at `n`
/// randomly drawn parameter entries, on a 32×32 float64 batch.
pub fn model_gradient(cfg: &ModelConfig, seed: u64, n: usize) -> Result<f64> {
    let (model, mut store) = Model::init::<f64>(cfg, seed)?;
    randomize_params(&mut store, seed, 0.5);
    let mut r = Rng::derive(seed, "model-gradient");
    let img = randn::<f64>(&[1, 32, 32, cfg.input_channels], &mut r);
    let labels: Vec<u8> = (0..32 * 32).map(|_| r.below(cfg.num_classes as u64) as u8).collect();
    let loss = |s: &ParamStore<f64>, grads: bool| -> Result<(f64, Option<crate::autograd::Gradients<f64>>)> {
        let g = if grads { Graph::new(s) } else { Graph::inference(s) };
        let (logits, _) = model.forward(&g, g.constant(img.clone()))?;
        let l = segmentation_loss(&g, logits, &labels, 32, 32)?;
        let v = g.value(l).item();
        Ok((v, if grads { Some(g.backward(l)?) } else { None }))
    };
    let grads = loss(&store, true)?.1.ok_or_else(|| contract("no gradients"))?;
    let ids: Vec<ParamId> = store.ids().collect();
    let h = 1e-5;
    let mut worst = 0f64;
    for _ in 0..n {
        let id = ids[r.below(ids.len() as u64) as usize];
        let idx = r.below(store.get(id).numel() as u64) as usize;
        let orig = store.get(id).data()[idx];
        let mut probe = store.clone();
        probe.get_mut(id).data_mut()[idx] = orig + h;
        let up = loss(&probe, false)?.0;
        probe.get_mut(id).data_mut()[idx] = orig - h;
        let down = loss(&probe, false)?.0;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[idx]);
        worst = worst.max(rel_error(analytic, numeric));
    }
    Ok(worst)
}

fn lin(i: usize, o: usize) -> usize {
    i * o + o
}

fn ffn_params(c: usize, e: usize) -> usize {
    2 * c + lin(c, e * c) + 9 * e * c + e * c + lin(e * c, c)
}

fn sra_params(c: usize, r: usize, e: usize) -> usize {
    let reduce = if r > 1 { r * r * c * c + c + 2 * c } else { 0 };
    2 * c + 4 * lin(c, c) + reduce + ffn_params(c, e)
}

fn interlevel_params(dq: usize, dkv: usize, d_hi: usize, d_lo: usize, slots: usize) -> usize {
    let d = d_hi.min(d_lo);
    lin(dq, d) + 2 * lin(dkv, d) + lin(d, dq) + slots + 2 * d_hi + 2 * d_lo
}

/// Parameters HILA adds to `cfg`, by hand: two inter-level layers, two
/// Mix-FFNs and one lower-level block per HILA stage, shared by all of its
/// wrapped blocks.
pub fn hila_param_formula(cfg: &ModelConfig) -> usize {
    (1..cfg.stages.len())
        .filter(|&l| cfg.stages[l].hila)
        .map(|l| {
            let (hi, lo) = (&cfg.stages[l], &cfg.stages[l - 1]);
            let slots = hi.p_patch * hi.p_patch;
            interlevel_params(hi.d, lo.d, hi.d, lo.d, slots)
                + interlevel_params(lo.d, hi.d, hi.d, lo.d, slots)
                + ffn_params(hi.d, hi.expansion)
                + ffn_params(lo.d, lo.expansion)
                + sra_params(lo.d, lo.reduction, lo.expansion)
        })
        .sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleAudit {
    /// Wrapped blocks seen in a traced forward pass with N=6, s=3.
    pub wrapped: Vec<usize>,
    pub top_down: Vec<usize>,
    /// `(N, measured added params, formula)`.
    pub added_params: Vec<(usize, usize, usize)>,
}

/// Traces a stage with N=6, s=3 and measures the HILA parameter overhead of
/// `cfg` at several depths.
pub fn schedule_audit(cfg: &ModelConfig, seed: u64) -> Result<ScheduleAudit> {
    let mut deep = ModelConfig::tiny(cfg.num_classes);
    deep.stages[1].blocks = 6;
    deep.stages[1].s_stride = 3;
    let (model, store) = Model::init::<f64>(&deep, seed)?;
    let g = Graph::inference(&store);
    let mut r = Rng::derive(seed, "schedule");
    let out = model.forward_encoder(&g, g.constant(randn(&[1, 32, 32, 3], &mut r)))?;
    let (wrapped, top_down) = (out.trace[1].wrapped_blocks.clone(), out.trace[1].top_down_blocks.clone());
    let roles = block_schedule(6, 3, true);
    if roles.iter().filter(|r| **r != BlockRole::Plain).count() != wrapped.len() {
        return Err(contract("schedule and trace disagree"));
    }
    let mut added = Vec::new();
    for n in [1, 2, 6] {
        let mut c = cfg.clone();
        for s in &mut c.stages {
            s.blocks = n;
        }
        let (on, _) = Model::init::<f32>(&c, seed)?;
        let (off, _) = Model::init::<f32>(&c.clone().with_hila(false), seed)?;
        added.push((n, on.num_params() - off.num_params(), hila_param_formula(&c)));
    }
    Ok(ScheduleAudit { wrapped, top_down, added_params: added })
}

#[derive(Debug, Clone, Serialize)]
pub struct FlopsRow {
    pub size: usize,
    pub stage: usize,
    pub counted_bottom_up: u64,
    pub formula_bottom_up: u64,
    pub counted_top_down: u64,
    pub formula_top_down: u64,
    pub counted_self_attention: u64,
    pub formula_self_attention: u64,
}

/// Instrumented MACs against the closed forms for every stage of `cfg` at
/// each square input `size`.
pub fn flops_audit(cfg: &ModelConfig, seed: u64, sizes: &[usize]) -> Result<Vec<FlopsRow>> {
    let (model, store) = Model::init::<f64>(cfg, seed)?;
    let mut r = Rng::derive(seed, "flops");
    let mut rows = Vec::new();
    for &size in sizes {
        let want = model_flops(cfg, size, size)?;
        let g = Graph::inference(&store);
        let out = model.forward_encoder(&g, g.constant(randn(&[1, size, size, cfg.input_channels], &mut r)))?;
        for (t, s) in out.trace.iter().zip(&want.stages) {
            let sc = &cfg.stages[s.stage - 1];
            let block = &model.stages[s.stage - 1].blocks[0];
            let x = g.constant(randn(&[1, s.height, s.width, sc.d], &mut r));
            let (res, counted) = count_macs(|| sra_attention(&g, x, block));
            res?;
            rows.push(FlopsRow {
                size,
                stage: s.stage,
                counted_bottom_up: t.bottom_up_macs,
                formula_bottom_up: s.interlevel.sum_prefix("bottom_up."),
                counted_top_down: t.top_down_macs,
                formula_top_down: s.interlevel.sum_prefix("top_down."),
                counted_self_attention: counted,
                formula_self_attention: flops_sra(s.height, s.width, sc.d, sc.reduction).total,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub seed: u64,
    /// Holds every per-op gradient to 1e-5 instead of 1e-3.
    pub float64: bool,
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteResult { name, passed, detail, seconds: t.elapsed().as_secs_f64() }
}

/// Runs every suite against `cfg`. Fails before any compute if the config
/// is invalid.
pub fn run_checks(cfg: &ModelConfig, opts: CheckOptions) -> Result<Vec<SuiteResult>> {
    cfg.validate()?;
    let seed = opts.seed;
    let op_tol = if opts.float64 { 1e-5 } else { 1e-3 };
    let mut out = vec![timed("oracle-equivalence", || {
        let s = oracle_equivalence(seed, 50)?;
        Ok((
            s.max_diff_f64 < 1e-10 && s.max_diff_f32 < 1e-5,
            format!("{} configs, max |Δ| f64 {:.1e}, f32 {:.1e}", s.configs, s.max_diff_f64, s.max_diff_f32),
        ))
    })];
    out.push(timed("normalization", || {
        let s = normalization(cfg, seed)?;
        let worst = s.bottom_up_rows.max(s.top_down_fold).max(s.hierarchy_rows);
        Ok((
            worst < 1e-5 && s.support_violations == 0,
            format!(
                "{} HILA stages, worst |Σ−1| {worst:.1e}, windows {:?}, {} support violations",
                s.stages_checked, s.window_sides, s.support_violations
            ),
        ))
    }));
    out.push(timed("adjointness", || {
        let gaps = adjointness(seed)?;
        let worst = gaps.iter().map(|g| g.1).fold(0.0, f64::max);
        Ok((worst < 1e-10, format!("{} pairs, worst gap {worst:.1e}", gaps.len())))
    }));
    out.push(timed("gradients", || {
        let ops = op_gradients(seed)?;
        let (worst_name, worst_op) = ops.iter().fold(("", 0.0), |a, &(n, e)| if e > a.1 { (n, e) } else { a });
        let block = hila_block_gradient(seed)?;
        let model = model_gradient(cfg, seed, 20)?;
        Ok((
            worst_op < op_tol && block < 1e-3 && model < 1e-3,
            format!(
                "{} ops worst {worst_op:.1e} ({worst_name}, tol {op_tol:.0e}); HILA step {block:.1e}; model {model:.1e}",
                ops.len()
            ),
        ))
    }));
    out.push(timed("schedule", || {
        let a = schedule_audit(cfg, seed)?;
        let shared = a.added_params.iter().all(|&(_, m, f)| m == f);
        let constant = a.added_params.windows(2).all(|w| w[0].1 == w[1].1);
        Ok((
            a.wrapped == [3, 6] && a.top_down == [6] && shared && constant,
            format!("N=6 s=3 wraps {:?}, top-down at {:?}; added params {:?}", a.wrapped, a.top_down, a.added_params),
        ))
    }));
    out.push(timed("flops-audit", || {
        let rows = flops_audit(cfg, seed, &[32, 64])?;
        let bad = rows
            .iter()
            .filter(|r| {
                r.counted_bottom_up != r.formula_bottom_up
                    || r.counted_top_down != r.formula_top_down
                    || r.counted_self_attention != r.formula_self_attention
            })
            .count();
        let (full, local) = attention_dot_reduction(16, 16, 32);
        let ratio_ok = full * 16 == local * 256;
        Ok((bad == 0 && ratio_ok, format!("{} stage rows, {bad} mismatches; dot reduction ratio {}", rows.len(), full / local)))
    }));
    Ok(out)
}
