//! Per-pixel reference implementation of top-down attention. It enumerates
//! each fine pixel's covering windows explicitly and shares nothing with the
//! fold/unfold path beyond layer norm.

use super::{check_shapes, Direction, InterLevelAttnParams, InterLevelWeights};
use crate::autograd::ParamStore;
use crate::error::{contract, Result};
use crate::layers::Linear;
use crate::tensor::{layer_norm, Scalar, Tensor};

fn project<T: Scalar>(store: &ParamStore<T>, lin: &Linear, x: &[T]) -> Vec<T> {
    let (w, b) = (store.get(lin.w).data(), store.get(lin.b).data());
    (0..lin.dout)
        .map(|o| b[o] + (0..lin.din).map(|i| x[i] * w[i * lin.dout + o]).sum::<T>())
        .collect()
}

/// Top-down attention by direct enumeration. For fine pixel `(y, x)` the
/// cover set is every window `(i, j)` with `y = s·i − p + a`,
/// `x = s·j − p + c` for some in-window offsets `a, c`; the pixel's weights
/// are a softmax over that set of `q·k/√d + bias[a·k + c]`.
pub fn top_down_attention_naive<T: Scalar>(
    store: &ParamStore<T>,
    x_lo: &Tensor<T>,
    x_hi: &Tensor<T>,
    p: &InterLevelAttnParams,
) -> Result<(Tensor<T>, InterLevelWeights<T>)> {
    if p.direction != Direction::TopDown {
        return Err(contract("top_down_attention_naive needs top-down parameters"));
    }
    let [b, ht, wt, h, w] = check_shapes(x_hi.dims4("naive")?, x_lo.dims4("naive")?, p)?;
    let geom = p.geometry;
    let (k, s, d) = (geom.kernel, geom.slots(), p.d);
    let (dl, dh) = (p.d_lo, p.d_hi);
    let (lo_n, _) = layer_norm(x_lo, store.get(p.ln_lo.gamma), store.get(p.ln_lo.beta))?;
    let (hi_n, _) = layer_norm(x_hi, store.get(p.ln_hi.gamma), store.get(p.ln_hi.beta))?;
    let bias = store.get(p.bias_table).data();
    let scale = T::one() / T::of(d as f64).sqrt();

    let keys: Vec<Vec<T>> = hi_n.data().chunks(dh).map(|r| project(store, &p.k, r)).collect();
    let vals: Vec<Vec<T>> = hi_n.data().chunks(dh).map(|r| project(store, &p.v, r)).collect();
    let mut out = x_lo.clone();
    let mut m = Tensor::zeros(&[b, ht * wt, s]);

    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let px = (bi * h + y) * w + x;
                let q = project(store, &p.q, &lo_n.data()[px * dl..(px + 1) * dl]);
                // (window index, slot, logit)
                let mut cover = Vec::with_capacity(4);
                for i in 0..ht {
                    let a = y as isize - geom.origin(i);
                    if a < 0 || a >= k as isize {
                        continue;
                    }
                    for j in 0..wt {
                        let c = x as isize - geom.origin(j);
                        if c < 0 || c >= k as isize {
                            continue;
                        }
                        let win = (bi * ht + i) * wt + j;
                        let slot = a as usize * k + c as usize;
                        let dot: T = q.iter().zip(&keys[win]).map(|(&u, &v)| u * v).sum();
                        cover.push((win, slot, dot * scale + bias[slot]));
                    }
                }
                let mx = cover.iter().map(|c| c.2).fold(T::neg_infinity(), T::max);
                let z: T = cover.iter().map(|c| (c.2 - mx).exp()).sum();
                let mut mixed = vec![T::zero(); d];
                for &(win, slot, logit) in &cover {
                    let wgt = (logit - mx).exp() / z;
                    m.data_mut()[win * s + slot] = wgt;
                    for (acc, &v) in mixed.iter_mut().zip(&vals[win]) {
                        *acc += wgt * v;
                    }
                }
                let upd = project(store, &p.f, &mixed);
                for (o, u) in out.data_mut()[px * dl..(px + 1) * dl].iter_mut().zip(upd) {
                    *o += u;
                }
            }
        }
    }
    let record = InterLevelWeights {
        m,
        direction: Direction::TopDown,
        geometry: geom,
        hi_hw: (ht, wt),
        lo_hw: (h, w),
    };
    Ok((out, record))
}
