use super::macs::record_macs;
use super::par::for_each_chunk;
use super::{Result, Scalar, Tensor, TensorError};

/// Layer-norm epsilon used everywhere in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Batched matrix product `[.., m, k] @ [.., k, n] -> [.., m, n]`.
///
/// Leading dims must either match exactly or be absent on one side (a rank-2
/// operand is broadcast across the other's batch).
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_t(a, b, false, false)
}

/// Rows per parallel task when one large product is split.
const GEMM_ROW_BLOCK: usize = 64;

/// [`matmul`] with either operand read transposed in its last two axes,
/// e.g. `matmul_t(a, b, true, false)` is `aᵀ·b` without materialising `aᵀ`.
pub fn matmul_t<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_a: bool, trans_b: bool) -> Result<Tensor<T>> {
    let mismatch = || TensorError::Dimension {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(mismatch());
    }
    let (ra, rb) = (a.rank(), b.rank());
    let (a0, a1) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (b0, b1) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    let (m, k) = if trans_a { (a1, a0) } else { (a0, a1) };
    let (k2, n) = if trans_b { (b1, b0) } else { (b0, b1) };
    if k != k2 {
        return Err(mismatch());
    }
    let lead_a = &a.shape()[..ra - 2];
    let lead_b = &b.shape()[..rb - 2];

    // (batches, rows per batch, a batch stride, b batch stride, output lead)
    let (batches, rows, a_stride, b_stride, mut out_shape) = if rb == 2 && !trans_a {
        // all lhs rows form one tall matrix
        let rows = lead_a.iter().product::<usize>() * m;
        (1, rows, 0, 0, lead_a.to_vec())
    } else if rb == 2 {
        (lead_a.iter().product(), m, m * k, 0, lead_a.to_vec())
    } else if lead_a == lead_b {
        (lead_a.iter().product(), m, m * k, k * n, lead_a.to_vec())
    } else if ra == 2 {
        (lead_b.iter().product(), m, 0, k * n, lead_b.to_vec())
    } else {
        return Err(mismatch());
    };
    out_shape.extend([m, n]);

    let macs = batches * rows * k * n;
    record_macs(macs as u64);
    let mut out = vec![T::zero(); batches * rows * n];
    // Element strides of the logical (untransposed) operands.
    let (rsa, csa) = if trans_a { (1, a1 as isize) } else { (a1 as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b1 as isize) } else { (b1 as isize, 1) };
    let (ad, bd) = (a.data(), b.data());
    // One task per batch, or fixed row blocks of a single product. Task
    // boundaries depend only on the shapes, never on the thread count.
    let block = if batches == 1 { GEMM_ROW_BLOCK.min(rows.max(1)) } else { rows };
    let blocks_per_batch = rows.div_ceil(block.max(1)).max(1);
    for_each_chunk(&mut out, block * n, macs, |t, c| {
        let (batch, r0) = (t / blocks_per_batch, (t % blocks_per_batch) * block);
        let nrows = c.len() / n.max(1);
        if nrows == 0 || n == 0 || k == 0 {
            // empty inner dimension: the product is the zero-filled chunk
            return;
        }
        let a_off = batch * a_stride + r0 * rsa as usize;
        let b_off = batch * b_stride;
        // Bounds: the last element each operand reads.
        let a_last = a_off + (nrows - 1) * rsa as usize + (k - 1) * csa as usize;
        let b_last = b_off + (k - 1) * rsb as usize + (n - 1) * csb as usize;
        assert!(a_last < ad.len() && b_last < bd.len(), "matmul operand bounds");
        // SAFETY: the asserts above bound every read; `c` is a distinct
        // mutable chunk of exactly nrows×n elements.
        unsafe {
            T::gemm(
                nrows,
                k,
                n,
                ad.as_ptr().add(a_off),
                rsa,
                csa,
                bd.as_ptr().add(b_off),
                rsb,
                csb,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
    Tensor::new(out_shape, out)
}

/// Swaps the last two axes.
pub fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(TensorError::Shape {
            op: "transpose_last2",
            msg: format!("need rank ≥ 2, got {:?}", x.shape()),
        });
    }
    let (m, n) = (x.shape()[r - 2], x.shape()[r - 1]);
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    let mut out = vec![T::zero(); x.numel()];
    let src = x.data();
    for (mat_out, mat_in) in out.chunks_mut(m * n).zip(src.chunks(m * n)) {
        for i in 0..m {
            for j in 0..n {
                mat_out[j * m + i] = mat_in[i * n + j];
            }
        }
    }
    Tensor::new(shape, out)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.last_dim();
    let mut out = x.data().to_vec();
    for_each_chunk(&mut out, c, x.numel() * 4, |_, row| softmax_row(row, None));
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

/// Softmax over the last axis restricted to entries where `mask` is true.
/// The mask is repeated cyclically over the tensor; masked entries come out
/// as exact zeros and take no probability mass.
pub fn softmax_lastdim_masked<T: Scalar>(x: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    let c = x.last_dim();
    if mask.is_empty() || !mask.len().is_multiple_of(c) || !x.numel().is_multiple_of(mask.len()) {
        return Err(TensorError::Shape {
            op: "softmax_lastdim_masked",
            msg: format!("mask of length {} does not tile shape {:?}", mask.len(), x.shape()),
        });
    }
    let rows_per_mask = mask.len() / c;
    let mut out = x.data().to_vec();
    for_each_chunk(&mut out, c, x.numel() * 4, |r, row| {
        let m = r % rows_per_mask;
        softmax_row(row, Some(&mask[m * c..(m + 1) * c]));
    });
    Tensor::new(x.shape().to_vec(), out)
}

fn softmax_row<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) {
    let valid = |i: usize| mask.is_none_or(|m| m[i]);
    let mut max = T::neg_infinity();
    for (i, &v) in row.iter().enumerate() {
        if valid(i) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (i, v) in row.iter_mut().enumerate() {
        if valid(i) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Saved statistics from [`layer_norm`] needed by its backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub normalized: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Layer norm over the last axis followed by the affine `gamma·x̂ + beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.last_dim();
    if gamma.numel() != d || beta.numel() != d {
        return Err(TensorError::Dimension {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let eps = T::of(LAYER_NORM_EPS);
    let inv_d = T::one() / T::of(d as f64);
    let rows = x.numel() / d.max(1);
    let mut xhat = x.data().to_vec();
    let mut rstd = vec![T::zero(); rows];
    for (row, r) in xhat.chunks_mut(d).zip(rstd.iter_mut()) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        *r = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * *r;
        }
    }
    let mut y = xhat.clone();
    for row in y.chunks_mut(d) {
        for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        LayerNormCache {
            normalized: Tensor::new(shape, xhat)?,
            rstd,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)` for upstream gradient `grad`.
pub fn layer_norm_backward<T: Scalar>(
    grad: &Tensor<T>,
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    grad.expect_same_shape(&cache.normalized, "layer_norm_backward")?;
    let d = grad.last_dim();
    let inv_d = T::one() / T::of(d as f64);
    let mut dx = vec![T::zero(); grad.numel()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for (r, ((g_row, xh_row), dx_row)) in grad
        .data()
        .chunks(d)
        .zip(cache.normalized.data().chunks(d))
        .zip(dx.chunks_mut(d))
        .enumerate()
    {
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            dgamma[j] += g_row[j] * xh_row[j];
            dbeta[j] += g_row[j];
            dxhat[j] = g_row[j] * gamma.data()[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh_row[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rstd = cache.rstd[r];
        for j in 0..d {
            dx_row[j] = rstd * (dxhat[j] - mean_dxhat - xh_row[j] * mean_dxhat_xhat);
        }
    }
    Ok((
        Tensor::new(grad.shape().to_vec(), dx)?,
        Tensor::new(vec![d], dgamma)?,
        Tensor::new(vec![d], dbeta)?,
    ))
}

/// Exact-erf GELU: `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::of(0.5);
    let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
    x.map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()))
}

/// Elementwise derivative of [`gelu`]: `Φ(x) + x·φ(x)`.
pub fn gelu_grad<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::of(0.5);
    let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::of(0.398_942_280_401_432_7);
    x.map(|v| {
        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
        let pdf = inv_sqrt_2pi * (-half * v * v).exp();
        cdf + v * pdf
    })
}

/// Interpolation taps along one axis: `(i0, i1, w0, w1)` per output index.
fn bilinear_taps<T: Scalar>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T, T)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l1 = src - i0 as f64;
            (i0, i1, T::of(1.0 - l1), T::of(l1))
        })
        .collect()
}

/// Bilinear resize of a `B×H×W×C` tensor, half-pixel (align-corners=false)
/// convention with edge clamping.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [b, h, w, c] = x.dims4("bilinear_resize")?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(TensorError::Shape {
            op: "bilinear_resize",
            msg: format!("cannot resize {h}×{w} to {out_h}×{out_w}"),
        });
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let src = x.data();
    let mut out = vec![T::zero(); b * out_h * out_w * c];
    for_each_chunk(&mut out, out_w * c, b * out_h * out_w * c * 4, |r, row| {
        let (bi, oy) = (r / out_h, r % out_h);
        let (y0, y1, wy0, wy1) = ty[oy];
        let base = bi * h * w * c;
        for (ox, px) in row.chunks_mut(c).enumerate() {
            let (x0, x1, wx0, wx1) = tx[ox];
            let p00 = &src[base + (y0 * w + x0) * c..][..c];
            let p01 = &src[base + (y0 * w + x1) * c..][..c];
            let p10 = &src[base + (y1 * w + x0) * c..][..c];
            let p11 = &src[base + (y1 * w + x1) * c..][..c];
            for ch in 0..c {
                px[ch] = wy0 * (wx0 * p00[ch] + wx1 * p01[ch]) + wy1 * (wx0 * p10[ch] + wx1 * p11[ch]);
            }
        }
    });
    Tensor::new(vec![b, out_h, out_w, c], out)
}

/// Adjoint of [`bilinear_resize`]: scatters an output-sized gradient back to
/// the `in_h×in_w` grid.
pub fn bilinear_resize_backward<T: Scalar>(
    grad: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let [b, out_h, out_w, c] = grad.dims4("bilinear_resize_backward")?;
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(grad.clone());
    }
    let ty = bilinear_taps::<T>(in_h, out_h);
    let tx = bilinear_taps::<T>(in_w, out_w);
    let g = grad.data();
    let mut out = vec![T::zero(); b * in_h * in_w * c];
    for_each_chunk(&mut out, in_h * in_w * c, g.len() * 4, |bi, img| {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let gp = &g[((bi * out_h + oy) * out_w + ox) * c..][..c];
                for (yy, wy) in [(y0, wy0), (y1, wy1)] {
                    for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                        let wgt = wy * wx;
                        let dst = &mut img[(yy * in_w + xx) * c..][..c];
                        for ch in 0..c {
                            dst[ch] += wgt * gp[ch];
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![b, in_h, in_w, c], out)
}
