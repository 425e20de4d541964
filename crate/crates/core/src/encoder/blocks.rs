//! Patch merging and the spatial-reduction transformer block.

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{config, contract, Result};
use crate::interlevel::{mix_ffn, MixFfnParams};
use crate::layers::{Conv2d, LayerNorm, Linear};
use crate::tensor::Scalar;

/// Strided convolution plus layer norm that opens every stage.
#[derive(Debug, Clone)]
pub struct PatchMergeParams {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl PatchMergeParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, kernel, stride, kernel / 2, false)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), cout)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.norm.num_params()
    }
}

/// Conv `(K, S, pad ⌊K/2⌋)` then layer norm.
pub fn patch_merge<T: Scalar>(g: &Graph<'_, T>, x: Var, p: &PatchMergeParams) -> Result<Var> {
    let shape = g.shape(x);
    let k = p.conv.kernel;
    let pad = 2 * p.conv.padding;
    if shape.len() != 4 || shape[1] + pad < k || shape[2] + pad < k {
        return Err(contract(format!(
            "patch_merge: padded input {shape:?} smaller than the {k}×{k} kernel"
        )));
    }
    let y = p.conv.apply(g, x)?;
    p.norm.apply(g, y)
}

/// Pre-norm block: `x + MHA(LN x)` with keys and values taken from an
/// `R×R`-reduced map, then `x + FFN(x)`.
#[derive(Debug, Clone)]
pub struct SraBlockParams {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    /// Reduction conv and its norm, absent when `R = 1`.
    pub reduce: Option<(Conv2d, LayerNorm)>,
    pub ffn: MixFfnParams,
    pub d: usize,
    pub heads: usize,
    pub reduction: usize,
}

impl SraBlockParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        reduction: usize,
        expansion: usize,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) || reduction == 0 {
            return Err(config(format!(
                "{name}: d={d} must split into {heads} heads and R={reduction} must be positive"
            )));
        }
        let reduce = if reduction > 1 {
            Some((
                Conv2d::new(store, &format!("{name}.sr"), d, d, reduction, reduction, 0, false)?,
                LayerNorm::new(store, &format!("{name}.sr_norm"), d)?,
            ))
        } else {
            None
        };
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            q: Linear::new(store, &format!("{name}.q"), d, d)?,
            k: Linear::new(store, &format!("{name}.k"), d, d)?,
            v: Linear::new(store, &format!("{name}.v"), d, d)?,
            proj: Linear::new(store, &format!("{name}.proj"), d, d)?,
            reduce,
            ffn: MixFfnParams::new(store, &format!("{name}.ffn"), d, expansion)?,
            d,
            heads,
            reduction,
        })
    }

    pub fn num_params(&self) -> usize {
        let reduce = self.reduce.as_ref().map_or(0, |(c, n)| c.num_params() + n.num_params());
        self.norm.num_params()
            + self.q.num_params()
            + self.k.num_params()
            + self.v.num_params()
            + self.proj.num_params()
            + reduce
            + self.ffn.num_params()
    }
}

/// The attention half of the block. Returns the residual output and the
/// attention weights `[B, heads, H·W, M]`.
pub fn sra_attention<T: Scalar>(g: &Graph<'_, T>, x: Var, p: &SraBlockParams) -> Result<(Var, Var)> {
    let shape = g.shape(x);
    let [b, h, w, d] = match shape[..] {
        [b, h, w, d] if d == p.d => [b, h, w, d],
        _ => return Err(contract(format!("sra_block: input {shape:?}, block width {}", p.d))),
    };
    let n = p.norm.apply(g, x)?;
    let q = p.q.apply(g, n)?;
    let q = g.reshape(q, &[b, h * w, d])?;
    let q = g.split_heads(q, p.heads)?;

    let kv_src = match &p.reduce {
        Some((conv, norm)) => {
            // Pad up to a multiple of R so the reduction sees every pixel.
            let r = p.reduction;
            let padded = g.pad_hw(n, (r - h % r) % r, (r - w % r) % r)?;
            let reduced = conv.apply(g, padded)?;
            norm.apply(g, reduced)?
        }
        None => n,
    };
    let kv_shape = g.shape(kv_src);
    let m = kv_shape[1] * kv_shape[2];
    let k = p.k.apply(g, kv_src)?;
    let k = g.reshape(k, &[b, m, d])?;
    let k = g.split_heads(k, p.heads)?;
    let v = p.v.apply(g, kv_src)?;
    let v = g.reshape(v, &[b, m, d])?;
    let v = g.split_heads(v, p.heads)?;

    let kt = g.transpose_last2(k)?;
    let scores = g.matmul(q, kt)?;
    let dh = d / p.heads;
    let scores = g.scale(scores, T::one() / T::of(dh as f64).sqrt());
    let attn = g.softmax(scores);
    let ctx = g.matmul(attn, v)?;
    let ctx = g.merge_heads(ctx)?;
    let ctx = g.reshape(ctx, &[b, h, w, d])?;
    let out = p.proj.apply(g, ctx)?;
    Ok((g.add(x, out)?, attn))
}

pub fn sra_block<T: Scalar>(g: &Graph<'_, T>, x: Var, p: &SraBlockParams) -> Result<Var> {
    let (x1, _) = sra_attention(g, x, p)?;
    mix_ffn(g, x1, &p.ffn, 1.0, 1.0)
}
