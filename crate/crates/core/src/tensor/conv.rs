//! Sliding-window kernels: im2col/col2im, 2-D convolution and the
//! unfold/fold pair used by inter-level attention.

use super::kernels::{matmul, transpose_last2};
use super::macs::record_macs;
use super::par::for_each_chunk;
use super::{PatchGeometry, Result, Scalar, Tensor, TensorError};

fn out_extent(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

/// Extracts every `k×k` window (zero padded) of a `B×H×W×C` tensor into a
/// `[B·Ho·Wo, k·k·C]` matrix. Columns are ordered `(ky, kx, c)`.
pub fn im2col<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, usize, usize)> {
    let [b, h, w, c] = x.dims4("im2col")?;
    let (ho, wo) = match (out_extent(h, k, stride, padding), out_extent(w, k, stride, padding)) {
        (Some(ho), Some(wo)) if k > 0 => (ho, wo),
        _ => {
            return Err(TensorError::Shape {
                op: "im2col",
                msg: format!("{h}×{w} input too small for kernel {k} with padding {padding}"),
            })
        }
    };
    let row_len = k * k * c;
    let mut cols = vec![T::zero(); b * ho * wo * row_len];
    let src = x.data();
    for_each_chunk(&mut cols, row_len, b * ho * wo * row_len, |r, row| {
        let bi = r / (ho * wo);
        let (oy, ox) = ((r / wo) % ho, r % wo);
        for ky in 0..k {
            let y = (oy * stride + ky) as isize - padding as isize;
            if y < 0 || y as usize >= h {
                continue;
            }
            for kx in 0..k {
                let xx = (ox * stride + kx) as isize - padding as isize;
                if xx < 0 || xx as usize >= w {
                    continue;
                }
                let s = ((bi * h + y as usize) * w + xx as usize) * c;
                row[(ky * k + kx) * c..][..c].copy_from_slice(&src[s..s + c]);
            }
        }
    });
    Ok((Tensor::new(vec![b * ho * wo, row_len], cols)?, ho, wo))
}

/// Adjoint of [`im2col`]: sums every column entry back onto the pixel it was
/// read from. Entries that came from padding are dropped.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &[T],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (ho, wo) = match (out_extent(h, k, stride, padding), out_extent(w, k, stride, padding)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(TensorError::Shape {
                op: "col2im",
                msg: format!("{h}×{w} output too small for kernel {k}"),
            })
        }
    };
    let row_len = k * k * c;
    if cols.len() != b * ho * wo * row_len {
        return Err(TensorError::Shape {
            op: "col2im",
            msg: format!(
                "{} column entries do not match {b}×{ho}×{wo} windows of {row_len}",
                cols.len()
            ),
        });
    }
    let mut out = vec![T::zero(); b * h * w * c];
    for_each_chunk(&mut out, h * w * c, cols.len(), |bi, img| {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &cols[((bi * ho + oy) * wo + ox) * row_len..][..row_len];
                for ky in 0..k {
                    let y = (oy * stride + ky) as isize - padding as isize;
                    if y < 0 || y as usize >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let xx = (ox * stride + kx) as isize - padding as isize;
                        if xx < 0 || xx as usize >= w {
                            continue;
                        }
                        let dst = &mut img[(y as usize * w + xx as usize) * c..][..c];
                        for (d, &v) in dst.iter_mut().zip(&row[(ky * k + kx) * c..][..c]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![b, h, w, c], out)
}

fn conv_weight_dims<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    depthwise: bool,
) -> Result<(usize, usize)> {
    let [_, _, _, cin] = x.dims4("conv2d")?;
    let bad = || TensorError::Dimension {
        op: "conv2d",
        lhs: x.shape().to_vec(),
        rhs: weight.shape().to_vec(),
    };
    let [k, k2, wc, cout] = match weight.shape()[..] {
        [a, b, c, d] => [a, b, c, d],
        _ => return Err(bad()),
    };
    if k != k2 || k == 0 {
        return Err(bad());
    }
    if depthwise {
        if wc != 1 || cout != cin {
            return Err(bad());
        }
    } else if wc != cin {
        return Err(bad());
    }
    if bias.numel() != cout {
        return Err(TensorError::Dimension {
            op: "conv2d bias",
            lhs: weight.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    Ok((k, cout))
}

/// 2-D convolution over `B×H×W×Cin` with weights `k×k×Cin×Cout`
/// (`k×k×1×C` when `depthwise`). Zero padding; output extent is
/// `floor((H+2p−k)/stride)+1`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    depthwise: bool,
) -> Result<Tensor<T>> {
    if stride == 0 {
        return Err(TensorError::Shape {
            op: "conv2d",
            msg: "stride must be positive".into(),
        });
    }
    let (k, cout) = conv_weight_dims(x, weight, bias, depthwise)?;
    if !depthwise {
        let [b, _, _, _] = x.dims4("conv2d")?;
        let (cols, ho, wo) = im2col(x, k, stride, padding)?;
        let w2 = weight.clone().reshape(&[weight.numel() / cout, cout])?;
        let y = matmul(&cols, &w2)?.add_lastdim(bias)?;
        return y.reshape(&[b, ho, wo, cout]);
    }
    let [b, h, w, c] = x.dims4("conv2d")?;
    let (ho, wo) = match (out_extent(h, k, stride, padding), out_extent(w, k, stride, padding)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(TensorError::Shape {
                op: "conv2d",
                msg: format!("{h}×{w} input gives a non-positive output extent for kernel {k}"),
            })
        }
    };
    let macs = b * ho * wo * k * k * c;
    record_macs(macs as u64);
    let (src, wd) = (x.data(), weight.data());
    let mut out = vec![T::zero(); b * ho * wo * c];
    for_each_chunk(&mut out, wo * c, macs, |r, row| {
        let (bi, oy) = (r / ho, r % ho);
        for (ox, px) in row.chunks_mut(c).enumerate() {
            px.copy_from_slice(bias.data());
            for ky in 0..k {
                let y = (oy * stride + ky) as isize - padding as isize;
                if y < 0 || y as usize >= h {
                    continue;
                }
                for kx in 0..k {
                    let xx = (ox * stride + kx) as isize - padding as isize;
                    if xx < 0 || xx as usize >= w {
                        continue;
                    }
                    let s = &src[((bi * h + y as usize) * w + xx as usize) * c..][..c];
                    let wk = &wd[(ky * k + kx) * c..][..c];
                    for ch in 0..c {
                        px[ch] += s[ch] * wk[ch];
                    }
                }
            }
        }
    });
    Tensor::new(vec![b, ho, wo, c], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    grad: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    depthwise: bool,
) -> Result<ConvGrads<T>> {
    let [b, h, w, cin] = x.dims4("conv2d_backward")?;
    let [_, ho, wo, cout] = grad.dims4("conv2d_backward")?;
    let k = weight.shape()[0];
    let dbias = grad.sum_to_lastdim();
    if !depthwise {
        let (cols, _, _) = im2col(x, k, stride, padding)?;
        let g2 = grad.clone().reshape(&[b * ho * wo, cout])?;
        let dw = matmul(&transpose_last2(&cols)?, &g2)?.reshape(weight.shape())?;
        let w2 = weight.clone().reshape(&[k * k * cin, cout])?;
        let dcols = matmul(&g2, &transpose_last2(&w2)?)?;
        let dx = col2im(dcols.data(), b, h, w, cin, k, stride, padding)?;
        return Ok(ConvGrads {
            input: dx,
            weight: dw,
            bias: dbias,
        });
    }
    let c = cin;
    let (src, wd, g) = (x.data(), weight.data(), grad.data());
    let mut dx = vec![T::zero(); b * h * w * c];
    for_each_chunk(&mut dx, h * w * c, g.len() * k * k, |bi, img| {
        for oy in 0..ho {
            for ox in 0..wo {
                let gp = &g[((bi * ho + oy) * wo + ox) * c..][..c];
                for ky in 0..k {
                    let y = (oy * stride + ky) as isize - padding as isize;
                    if y < 0 || y as usize >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let xx = (ox * stride + kx) as isize - padding as isize;
                        if xx < 0 || xx as usize >= w {
                            continue;
                        }
                        let dst = &mut img[(y as usize * w + xx as usize) * c..][..c];
                        let wk = &wd[(ky * k + kx) * c..][..c];
                        for ch in 0..c {
                            dst[ch] += gp[ch] * wk[ch];
                        }
                    }
                }
            }
        }
    });
    let mut dw = vec![T::zero(); k * k * c];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let gp = &g[((bi * ho + oy) * wo + ox) * c..][..c];
                for ky in 0..k {
                    let y = (oy * stride + ky) as isize - padding as isize;
                    if y < 0 || y as usize >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let xx = (ox * stride + kx) as isize - padding as isize;
                        if xx < 0 || xx as usize >= w {
                            continue;
                        }
                        let s = &src[((bi * h + y as usize) * w + xx as usize) * c..][..c];
                        let dwk = &mut dw[(ky * k + kx) * c..][..c];
                        for ch in 0..c {
                            dwk[ch] += gp[ch] * s[ch];
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(vec![b, h, w, c], dx)?,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: dbias,
    })
}

/// Splits a `B×H×W×C` map into overlapping windows: `[B, Ht·Wt, k², C]`.
/// Slots are row-major within each window and padding taps are zero.
pub fn unfold<T: Scalar>(x: &Tensor<T>, g: &PatchGeometry) -> Result<Tensor<T>> {
    let [b, h, w, c] = x.dims4("unfold")?;
    let (ht, wt) = (g.windows(h)?, g.windows(w)?);
    let (cols, _, _) = im2col(x, g.kernel, g.stride, g.padding)?;
    cols.reshape(&[b, ht * wt, g.slots(), c])
}

/// Adjoint of [`unfold`]: overlapping window contributions are summed onto an
/// `out_h×out_w` map.
pub fn fold<T: Scalar>(
    patches: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    g: &PatchGeometry,
) -> Result<Tensor<T>> {
    let (b, l, slots, c) = match patches.shape()[..] {
        [b, l, s, c] => (b, l, s, c),
        _ => {
            return Err(TensorError::Geometry(format!(
                "fold expects [B, Ht·Wt, k², C], got {:?}",
                patches.shape()
            )))
        }
    };
    let (ht, wt) = (g.windows(out_h)?, g.windows(out_w)?);
    if l != ht * wt || slots != g.slots() {
        return Err(TensorError::Geometry(format!(
            "patches {:?} do not match a {out_h}×{out_w} map ({ht}×{wt} windows of {} slots)",
            patches.shape(),
            g.slots()
        )));
    }
    col2im(patches.data(), b, out_h, out_w, c, g.kernel, g.stride, g.padding)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    /// Direct six-loop convolution.
    #[allow(clippy::needless_range_loop)]
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], s: usize, p: usize) -> Tensor<f64> {
        let [b, h, wd, cin] = x.dims4("t").unwrap();
        let (k, cout) = (w.shape()[0], w.shape()[3]);
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        let mut out = Tensor::zeros(&[b, ho, wo, cout]);
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..cout {
                        let mut acc = bias[co];
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * s + ky) as isize - p as isize;
                                let xx = (ox * s + kx) as isize - p as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x.at(&[bi, y as usize, xx as usize, ci])
                                        * w.at(&[ky, kx, ci, co]);
                                }
                            }
                        }
                        let idx = ((bi * ho + oy) * wo + ox) * cout + co;
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_shape_formula() {
        let x = Tensor::<f32>::zeros(&[1, 32, 32, 3]);
        let w = Tensor::<f32>::zeros(&[7, 7, 3, 4]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[4]), 4, 3, false).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8, 4]);
        let tiny = Tensor::<f32>::zeros(&[1, 2, 2, 3]);
        assert!(conv2d(&tiny, &w, &Tensor::zeros(&[4]), 1, 0, false).is_err());
    }

    #[test]
    fn unit_kernel_identity() {
        let x = Tensor::<f64>::from_f64(vec![1, 3, 3, 2], &lcg(1, 18)).unwrap();
        let w = Tensor::<f64>::from_f64(vec![1, 1, 2, 2], &[1., 0., 0., 1.]).unwrap();
        assert_eq!(conv2d(&x, &w, &Tensor::zeros(&[2]), 1, 0, false).unwrap(), x);
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        for (s, p) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let x = Tensor::<f64>::from_f64(vec![1, 5, 5, 2], &lcg(3, 50)).unwrap();
            let w = Tensor::<f64>::from_f64(vec![3, 3, 2, 3], &lcg(4, 54)).unwrap();
            let bias = [0.1, -0.2, 0.3];
            let got = conv2d(&x, &w, &Tensor::from_f64(vec![3], &bias).unwrap(), s, p, false).unwrap();
            let want = naive_conv(&x, &w, &bias, s, p);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn depthwise_matches_per_channel_dense() {
        let x = Tensor::<f64>::from_f64(vec![2, 4, 5, 3], &lcg(7, 120)).unwrap();
        let wdw = Tensor::<f64>::from_f64(vec![3, 3, 1, 3], &lcg(8, 27)).unwrap();
        // dense weight with zeros off the channel diagonal
        let mut dense = Tensor::<f64>::zeros(&[3, 3, 3, 3]);
        for t in 0..9 {
            for c in 0..3 {
                dense.data_mut()[t * 9 + c * 3 + c] = wdw.data()[t * 3 + c];
            }
        }
        let bias = Tensor::<f64>::from_f64(vec![3], &[0.5, 0.0, -1.0]).unwrap();
        let a = conv2d(&x, &wdw, &bias, 1, 1, true).unwrap();
        let b = conv2d(&x, &dense, &bias, 1, 1, false).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn unfold_window_contents() {
        let g = PatchGeometry::default();
        let ones = Tensor::<f64>::ones(&[1, 4, 4, 1]);
        let p = unfold(&ones, &g).unwrap();
        assert_eq!(p.shape(), &[1, 4, 16, 1]);
        // window (0,0) spans rows/cols −1..2: the 3×3 in-bounds block is ones
        assert_eq!(p.data()[..16].iter().filter(|&&v| v == 1.0).count(), 9);
        let small = unfold(&Tensor::<f64>::ones(&[1, 2, 2, 1]), &g).unwrap();
        assert_eq!(small.shape(), &[1, 1, 16, 1]);
        assert_eq!(small.sum(), 4.0);
        assert!(unfold(&Tensor::<f64>::zeros(&[1, 6, 4, 3]), &g)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(unfold(&Tensor::<f64>::zeros(&[1, 5, 4, 1]), &g).is_err());
    }

    #[test]
    fn fold_of_unfold_is_coverage() {
        let g = PatchGeometry::default();
        let ones = Tensor::<f64>::ones(&[1, 4, 4, 1]);
        let cov = fold(&unfold(&ones, &g).unwrap(), 4, 4, &g).unwrap();
        let expect = [1., 2., 2., 1., 2., 4., 4., 2., 2., 4., 4., 2., 1., 2., 2., 1.];
        assert_eq!(cov.data(), &expect);
        let z = fold(&Tensor::<f64>::zeros(&[1, 4, 16, 2]), 4, 4, &g).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(fold(&Tensor::<f64>::zeros(&[1, 3, 16, 2]), 4, 4, &g).is_err());
    }
}
