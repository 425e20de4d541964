//! Differentiable ops. Each forward calls a tensor kernel; each pull-back is
//! written against the kernel's adjoint.

use std::sync::Arc;

use super::{Grads, Graph, Var};
use crate::error::{contract, Result};
use crate::tensor::{self as tk, PatchGeometry, Scalar, Tensor};

fn same<T: Scalar>(g: &Tensor<T>) -> Option<Tensor<T>> {
    Some(g.clone())
}

/// Sums a `[.., m, n]` tensor over its leading axes.
fn sum_leading<T: Scalar>(t: &Tensor<T>, m: usize, n: usize) -> Result<Tensor<T>> {
    let mut out = vec![T::zero(); m * n];
    for chunk in t.data().chunks(m * n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Ok(Tensor::new(vec![m, n], out)?)
}

/// `[B, N, h, dh] <-> [B, h, N, dh]`.
fn swap_axes_1_2<T: Scalar>(t: &Tensor<T>, b: usize, n1: usize, n2: usize, d: usize) -> Vec<T> {
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for i in 0..n1 {
            for j in 0..n2 {
                let s = ((bi * n1 + i) * n2 + j) * d;
                let o = ((bi * n2 + j) * n1 + i) * d;
                out[o..o + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

impl<T: Scalar> Graph<'_, T> {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(&self.value(b))?;
        Ok(self.push(out, &[a, b], |g, _| Ok(vec![same(g), same(g)])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(&self.value(b))?;
        Ok(self.push(out, &[a, b], |g, _| {
            Ok(vec![same(g), Some(g.scale(-T::one()))])
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.mul(&bv)?;
        Ok(self.push(out, &[a, b], move |g, need| {
            Ok(vec![
                if need[0] { Some(g.mul(&bv)?) } else { None },
                if need[1] { Some(g.mul(&av)?) } else { None },
            ])
        }))
    }

    /// Elementwise quotient.
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.zip_map(&bv, "div", |x, y| x / y)?;
        let y = Arc::new(out.clone());
        Ok(self.push(out, &[a, b], move |g, need| {
            let ga = g.zip_map(&bv, "div", |g, b| g / b)?;
            let gb = if need[1] {
                Some(ga.zip_map(&y, "div", |gab, y| -gab * y)?)
            } else {
                None
            };
            Ok(vec![Some(ga), gb])
        }))
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, &[a], move |g, _| Ok(vec![Some(g.scale(s))]))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let bshape = self.shape(bias);
        let out = self.value(x).add_lastdim(&self.value(bias))?;
        Ok(self.push(out, &[x, bias], move |g, need| {
            let gb = if need[1] {
                Some(g.sum_to_lastdim().reshape(&bshape)?)
            } else {
                None
            };
            Ok(vec![same(g), gb])
        }))
    }

    pub fn exp(&self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        let y = Arc::new(out.clone());
        self.push(out, &[x], move |g, _| Ok(vec![Some(g.mul(&y)?)]))
    }

    /// Replaces exact zeros by one. Gradient passes where the input was
    /// nonzero and is zero elsewhere.
    pub fn guard_zero_to_one(&self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.map(|v| if v == T::zero() { T::one() } else { v });
        self.push(out, &[x], move |g, _| {
            Ok(vec![Some(g.zip_map(&xv, "guard", |g, v| {
                if v == T::zero() {
                    T::zero()
                } else {
                    g
                }
            })?)])
        })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let out = Tensor::scalar(xv.sum());
        self.push(out, &[x], move |g, _| Ok(vec![Some(Tensor::full(&shape, g.item()))]))
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Batched matrix product with the broadcasting rules of
    /// [`tk::matmul`].
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = tk::matmul(&av, &bv)?;
        Ok(self.push(out, &[a, b], move |g, need| {
            let (ra, rb) = (av.rank(), bv.rank());
            let (m, k) = (av.shape()[ra - 2], av.shape()[ra - 1]);
            let n = bv.shape()[rb - 1];
            if rb == 2 {
                // lhs rows flattened into one matrix
                let rows = av.numel() / k;
                let g2 = g.clone().reshape(&[rows, n])?;
                let ga = if need[0] {
                    Some(tk::matmul_t(&g2, &bv, false, true)?.reshape(av.shape())?)
                } else {
                    None
                };
                let gb = if need[1] {
                    let a2 = (*av).clone().reshape(&[rows, k])?;
                    Some(tk::matmul_t(&a2, &g2, true, false)?)
                } else {
                    None
                };
                return Ok(vec![ga, gb]);
            }
            let ga = if need[0] {
                let full = tk::matmul_t(g, &bv, false, true)?;
                Some(if ra == 2 { sum_leading(&full, m, k)? } else { full })
            } else {
                None
            };
            let gb = if need[1] {
                Some(tk::matmul_t(&av, g, true, false)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    /// `x @ w + b` over the last axis.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn transpose_last2(&self, x: Var) -> Result<Var> {
        let out = tk::transpose_last2(&self.value(x))?;
        Ok(self.push(out, &[x], |g, _| Ok(vec![Some(tk::transpose_last2(g)?)])))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x);
        let out = (*self.value(x)).clone().reshape(shape)?;
        Ok(self.push(out, &[x], move |g, _| Ok(vec![Some(g.clone().reshape(&old)?)])))
    }

    fn softmax_pullback(y: Arc<Tensor<T>>) -> impl Fn(&Tensor<T>, &[bool]) -> Result<Grads<T>> {
        move |g, _| {
            let c = y.last_dim();
            let mut dx = vec![T::zero(); y.numel()];
            for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot);
                }
            }
            Ok(vec![Some(Tensor::new(y.shape().to_vec(), dx)?)])
        }
    }

    pub fn softmax(&self, x: Var) -> Var {
        let out = tk::softmax_lastdim(&self.value(x));
        let y = Arc::new(out.clone());
        self.push(out, &[x], Self::softmax_pullback(y))
    }

    /// Softmax restricted to `mask` (tiled cyclically over the tensor).
    pub fn softmax_masked(&self, x: Var, mask: &[bool]) -> Result<Var> {
        let out = tk::softmax_lastdim_masked(&self.value(x), mask)?;
        let y = Arc::new(out.clone());
        Ok(self.push(out, &[x], Self::softmax_pullback(y)))
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let gv = self.value(gamma);
        let (out, cache) = tk::layer_norm(&self.value(x), &gv, &self.value(beta))?;
        let gshape = gv.shape().to_vec();
        Ok(self.push(out, &[x, gamma, beta], move |g, _| {
            let (dx, dg, db) = tk::layer_norm_backward(g, &cache, &gv)?;
            Ok(vec![Some(dx), Some(dg.reshape(&gshape)?), Some(db.reshape(&gshape)?)])
        }))
    }

    pub fn gelu(&self, x: Var) -> Var {
        let xv = self.value(x);
        let out = tk::gelu(&xv);
        self.push(out, &[x], move |g, _| Ok(vec![Some(g.mul(&tk::gelu_grad(&xv))?)]))
    }

    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        depthwise: bool,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let bshape = self.shape(b);
        let out = tk::conv2d(&xv, &wv, &self.value(b), stride, padding, depthwise)?;
        Ok(self.push(out, &[x, w, b], move |g, need| {
            let gr = tk::conv2d_backward(g, &xv, &wv, stride, padding, depthwise)?;
            Ok(vec![
                need[0].then_some(gr.input),
                Some(gr.weight),
                Some(gr.bias.reshape(&bshape)?),
            ])
        }))
    }

    pub fn unfold(&self, x: Var, geom: PatchGeometry) -> Result<Var> {
        let [_, h, w, _] = self.value(x).dims4("unfold")?;
        let out = tk::unfold(&self.value(x), &geom)?;
        Ok(self.push(out, &[x], move |g, _| Ok(vec![Some(tk::fold(g, h, w, &geom)?)])))
    }

    pub fn fold(&self, p: Var, out_h: usize, out_w: usize, geom: PatchGeometry) -> Result<Var> {
        let out = tk::fold(&self.value(p), out_h, out_w, &geom)?;
        Ok(self.push(out, &[p], move |g, _| Ok(vec![Some(tk::unfold(g, &geom)?)])))
    }

    pub fn bilinear(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        let [_, h, w, _] = xv.dims4("bilinear")?;
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        let out = tk::bilinear_resize(&xv, out_h, out_w)?;
        Ok(self.push(out, &[x], move |g, _| {
            Ok(vec![Some(tk::bilinear_resize_backward(g, h, w)?)])
        }))
    }

    pub fn concat_lastdim(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Arc<Tensor<T>>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_lastdim(&refs)?;
        let widths: Vec<usize> = vals.iter().map(|v| v.last_dim()).collect();
        Ok(self.push(out, parts, move |g, _| {
            Ok(g.split_lastdim(&widths)?.into_iter().map(Some).collect())
        }))
    }

    /// Zero-pads a `B×H×W×C` map at the bottom and right.
    pub fn pad_hw(&self, x: Var, pad_h: usize, pad_w: usize) -> Result<Var> {
        if pad_h == 0 && pad_w == 0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let [b, h, w, c] = xv.dims4("pad_hw")?;
        let (nh, nw) = (h + pad_h, w + pad_w);
        let mut out = Tensor::zeros(&[b, nh, nw, c]);
        for bi in 0..b {
            for y in 0..h {
                let s = ((bi * h + y) * w) * c;
                let d = ((bi * nh + y) * nw) * c;
                out.data_mut()[d..d + w * c].copy_from_slice(&xv.data()[s..s + w * c]);
            }
        }
        Ok(self.push(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(&[b, h, w, c]);
            for bi in 0..b {
                for y in 0..h {
                    let s = ((bi * nh + y) * nw) * c;
                    let d = ((bi * h + y) * w) * c;
                    dx.data_mut()[d..d + w * c].copy_from_slice(&g.data()[s..s + w * c]);
                }
            }
            Ok(vec![Some(dx)])
        }))
    }

    /// `[B, N, heads·dh] -> [B, heads, N, dh]`.
    pub fn split_heads(&self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let (b, n, c) = match xv.shape()[..] {
            [b, n, c] if heads > 0 && c % heads == 0 => (b, n, c),
            _ => {
                return Err(contract(format!(
                    "split_heads: cannot split {:?} into {heads} heads",
                    xv.shape()
                )))
            }
        };
        let dh = c / heads;
        let out = Tensor::new(vec![b, heads, n, dh], swap_axes_1_2(&xv, b, n, heads, dh))?;
        Ok(self.push(out, &[x], move |g, _| {
            Ok(vec![Some(Tensor::new(vec![b, n, c], swap_axes_1_2(g, b, heads, n, dh))?)])
        }))
    }

    /// `[B, heads, N, dh] -> [B, N, heads·dh]`.
    pub fn merge_heads(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, heads, n, dh] = match xv.shape()[..] {
            [b, h, n, d] => [b, h, n, d],
            _ => return Err(contract(format!("merge_heads: bad shape {:?}", xv.shape()))),
        };
        let out = Tensor::new(vec![b, n, heads * dh], swap_axes_1_2(&xv, b, heads, n, dh))?;
        Ok(self.push(out, &[x], move |g, _| {
            Ok(vec![Some(Tensor::new(vec![b, heads, n, dh], swap_axes_1_2(g, b, n, heads, dh))?)])
        }))
    }

    /// Mean cross-entropy of `logits[.., C]` against integer `labels`, one per
    /// row. Rows labelled `ignore` are skipped; if every row is ignored the
    /// loss is zero with zero gradient.
    pub fn cross_entropy(&self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.last_dim();
        let rows = lv.numel() / c.max(1);
        if labels.len() != rows {
            return Err(contract(format!(
                "cross_entropy: {} labels for {rows} rows of logits {:?}",
                labels.len(),
                lv.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= c) {
            return Err(contract(format!("cross_entropy: label {bad} out of range for {c} classes")));
        }
        let valid = labels.iter().filter(|&&l| l != ignore).count();
        let probs = tk::softmax_lastdim(&lv);
        let mut loss = T::zero();
        for (r, &l) in labels.iter().enumerate() {
            if l == ignore {
                continue;
            }
            let row = &lv.data()[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
            loss += lse - row[l as usize];
        }
        let inv = if valid == 0 { T::zero() } else { T::one() / T::of(valid as f64) };
        let labels = labels.to_vec();
        Ok(self.push(Tensor::scalar(loss * inv), &[logits], move |g, _| {
            let s = g.item() * inv;
            let mut d = probs.clone();
            for (r, row) in d.data_mut().chunks_mut(c).enumerate() {
                let l = labels[r];
                if l == ignore {
                    row.iter_mut().for_each(|v| *v = T::zero());
                    continue;
                }
                row[l as usize] -= T::one();
                row.iter_mut().for_each(|v| *v *= s);
            }
            Ok(vec![Some(d)])
        }))
    }
}
