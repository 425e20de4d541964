//! Dense row-major tensors and the forward kernels the rest of the crate is
//! built on.
//!
//! Layout is `B×H×W×C` throughout. Every kernel here is a pure function of its
//! inputs; parallel variants split work so that each output element is
//! produced by the same sequential loop regardless of thread count.

mod conv;
mod io;
mod kernels;
mod macs;
pub(crate) mod par;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

pub use conv::{col2im, conv2d, conv2d_backward, fold, im2col, unfold, ConvGrads};
pub use io::{read_hilt, read_hilt_file, write_hilt, write_hilt_file};
pub use kernels::{
    bilinear_resize, bilinear_resize_backward, gelu, gelu_grad, layer_norm, layer_norm_backward,
    matmul, matmul_t, softmax_lastdim, softmax_lastdim_masked, transpose_last2, LayerNormCache,
    LAYER_NORM_EPS,
};
pub use macs::{count_macs, record_macs};

/// Errors raised by tensor construction and kernels.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("patch geometry: {0}")]
    Geometry(String),
    #[error("tensor format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Element type tag stored in the HILT file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type. Implemented for `f32` (working precision)
/// and `f64` (oracles and gradient checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    /// Lossy conversion from an `f64` literal.
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `C = A·B` for an `m×k` by `k×n` product with arbitrary element
    /// strides; `C` is overwritten.
    ///
    /// # Safety
    /// Every strided access must stay inside the allocations behind the
    /// pointers, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc)
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape {
                op: "Tensor::new",
                msg: format!("shape {shape:?} implies {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from an `f64` buffer, converting each element.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// Single element at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            debug_assert!(i < n);
            flat = flat * n + i;
        }
        self.data[flat]
    }

    /// The value of a rank-0 or single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a vector along the last axis.
    pub fn add_lastdim(&self, bias: &Self) -> Result<Self> {
        let c = self.last_dim();
        if bias.numel() != c {
            return Err(TensorError::Dimension {
                op: "add_lastdim",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            for (v, &b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Sums every leading axis away, leaving a vector the size of the last axis.
    pub fn sum_to_lastdim(&self) -> Self {
        let c = self.last_dim();
        let mut out = vec![T::zero(); c];
        for row in self.data.chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Self {
            shape: vec![c],
            data: out,
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().map(|v| v.abs()).fold(T::zero(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates along the last axis. All leading extents must agree.
    pub fn concat_lastdim(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::Shape {
            op: "concat_lastdim",
            msg: "no inputs".into(),
        })?;
        let lead = &first.shape[..first.rank() - 1];
        let rows: usize = lead.iter().product();
        for p in parts {
            if &p.shape[..p.rank() - 1] != lead {
                return Err(TensorError::Dimension {
                    op: "concat_lastdim",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| p.last_dim()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let c = p.last_dim();
                data.extend_from_slice(&p.data[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Self { shape, data })
    }

    /// Splits the last axis into consecutive pieces of the given widths.
    pub fn split_lastdim(&self, widths: &[usize]) -> Result<Vec<Self>> {
        let c = self.last_dim();
        if widths.iter().sum::<usize>() != c {
            return Err(TensorError::Shape {
                op: "split_lastdim",
                msg: format!("widths {widths:?} do not sum to {c}"),
            });
        }
        let lead = &self.shape[..self.rank() - 1];
        let rows: usize = lead.iter().product();
        let mut out: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
        for r in 0..rows {
            let mut off = r * c;
            for (buf, &w) in out.iter_mut().zip(widths) {
                buf.extend_from_slice(&self.data[off..off + w]);
                off += w;
            }
        }
        Ok(out
            .into_iter()
            .zip(widths)
            .map(|(data, &w)| {
                let mut shape = lead.to_vec();
                shape.push(w);
                Self { shape, data }
            })
            .collect())
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Checks for a rank-4 `B×H×W×C` tensor and returns its extents.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, h, w, c] => Ok([b, h, w, c]),
            _ => Err(TensorError::Shape {
                op,
                msg: format!("expected a B×H×W×C tensor, got shape {:?}", self.shape),
            }),
        }
    }
}

/// Sliding-window geometry shared by unfold/fold and the inter-level
/// attention layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        Self {
            kernel: 4,
            stride: 2,
            padding: 1,
        }
    }
}

impl PatchGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(TensorError::Geometry(format!(
                "kernel ({kernel}) and stride ({stride}) must be positive"
            )));
        }
        if kernel < stride {
            return Err(TensorError::Geometry(format!(
                "kernel {kernel} smaller than stride {stride} leaves uncovered pixels"
            )));
        }
        if 2 * padding >= kernel {
            return Err(TensorError::Geometry(format!(
                "padding {padding} too large for kernel {kernel}"
            )));
        }
        Ok(Self {
            kernel,
            stride,
            padding,
        })
    }

    /// Inter-level geometry for a patch side `p`: stride 2, centred padding.
    pub fn for_patch(patch: usize) -> Result<Self> {
        if patch < 2 || !patch.is_multiple_of(2) {
            return Err(TensorError::Geometry(format!(
                "inter-level patch side must be even and ≥ 2, got {patch}"
            )));
        }
        Self::new(patch, 2, (patch - 2) / 2)
    }

    pub fn slots(&self) -> usize {
        self.kernel * self.kernel
    }

    /// Number of window positions along an axis of length `n`. Errors unless
    /// the windows tile the padded extent exactly.
    pub fn windows(&self, n: usize) -> Result<usize> {
        let padded = n + 2 * self.padding;
        if padded < self.kernel || !(padded - self.kernel).is_multiple_of(self.stride) {
            return Err(TensorError::Geometry(format!(
                "extent {n} with kernel {}, stride {}, padding {} gives a non-integral window count",
                self.kernel, self.stride, self.padding
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// First input coordinate (possibly negative) covered by window `i`.
    #[inline]
    pub fn origin(&self, i: usize) -> isize {
        (i * self.stride) as isize - self.padding as isize
    }

    /// Input coordinate of tap `a` in window `i`, or `None` when it falls in
    /// the padding.
    #[inline]
    pub fn tap(&self, i: usize, a: usize, n: usize) -> Option<usize> {
        let y = self.origin(i) + a as isize;
        (y >= 0 && (y as usize) < n).then_some(y as usize)
    }

    /// Validity mask over `[Ht·Wt, k²]`: true where the slot reads a real pixel.
    pub fn slot_mask(&self, h: usize, w: usize) -> Result<Vec<bool>> {
        let (ht, wt) = (self.windows(h)?, self.windows(w)?);
        let k = self.kernel;
        let mut mask = Vec::with_capacity(ht * wt * k * k);
        for i in 0..ht {
            for j in 0..wt {
                for a in 0..k {
                    for c in 0..k {
                        mask.push(self.tap(i, a, h).is_some() && self.tap(j, c, w).is_some());
                    }
                }
            }
        }
        Ok(mask)
    }
}
