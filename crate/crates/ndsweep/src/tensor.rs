//! Dense row-major tensors and the handful of primitives a CNN needs:
//! elementwise access, general matrix multiply, and im2col / col2im
//! lowering for convolutions.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use crate::error::{Error, Result};

/// Element type for tensors. Experiments run in `f32`; gradient checks
/// instantiate everything in `f64` for finite-difference headroom.
pub trait Scalar:
    num_float::Float + Copy + Default + Debug + Display + Sum + Send + Sync + PartialOrd + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

// Minimal float abstraction so we do not pull in a numerics crate for
// two impls.
pub mod num_float {
    pub trait Float:
        Sized
        + Copy
        + PartialOrd
        + std::ops::Add<Output = Self>
        + std::ops::Sub<Output = Self>
        + std::ops::Mul<Output = Self>
        + std::ops::Div<Output = Self>
        + std::ops::Neg<Output = Self>
        + std::ops::AddAssign
        + std::ops::SubAssign
        + std::ops::MulAssign
    {
        const ZERO: Self;
        const ONE: Self;
        fn abs(self) -> Self;
        fn max(self, other: Self) -> Self;
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn sqrt(self) -> Self;
        fn is_finite(self) -> bool;
    }

    macro_rules! impl_float {
        ($t:ty) => {
            impl Float for $t {
                const ZERO: Self = 0.0;
                const ONE: Self = 1.0;
                fn abs(self) -> Self {
                    <$t>::abs(self)
                }
                fn max(self, other: Self) -> Self {
                    <$t>::max(self, other)
                }
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
                fn ln(self) -> Self {
                    <$t>::ln(self)
                }
                fn sqrt(self) -> Self {
                    <$t>::sqrt(self)
                }
                fn is_finite(self) -> bool {
                    <$t>::is_finite(self)
                }
            }
        };
    }
    impl_float!(f32);
    impl_float!(f64);
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array, contiguous row-major (last index fastest).
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?} {:?}", self.shape, self.data)
    }
}

impl<T: Scalar> Tensor<T> {
    /// New tensor with every element set to `fill`.
    pub fn alloc(shape: &[usize], fill: T) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "dimensions must be >= 1, got {shape:?}"
            )));
        }
        let len = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::alloc(shape, T::ZERO)
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "dimensions must be >= 1, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} expects {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Same data, new shape. The element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || expected != self.data.len() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} ({} elems) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn fill(&mut self, value: T) {
        self.data.fill(value);
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    /// 2-d accessor; rows/cols of a matrix-shaped tensor.
    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn as_matrix(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::InvalidShape(format!(
                "expected a 2-d tensor, got {other:?}"
            ))),
        }
    }
}

/// General matrix multiply: `c = op(a) * op(b)` where `op` is an optional
/// transpose. Accumulation runs over the inner index in ascending order,
/// which keeps prefix-masked sums bit-identical to physically truncated
/// ones.
pub fn gemm<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    transpose_a: bool,
    transpose_b: bool,
) -> Result<Tensor<T>> {
    let (ar, ac) = a.as_matrix()?;
    let (br, bc) = b.as_matrix()?;
    let (m, k) = if transpose_a { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if transpose_b { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(Error::InvalidShape(format!(
            "gemm inner dimensions disagree: {k} vs {kb}"
        )));
    }

    // Transposed operands are materialized once so the kernel always
    // walks contiguous rows.
    let a_t;
    let a_rows: &[T] = if transpose_a {
        a_t = transpose_copy(a.data(), ar, ac);
        &a_t
    } else {
        a.data()
    };
    let b_t;
    let b_rows: &[T] = if transpose_b {
        b_t = transpose_copy(b.data(), br, bc);
        &b_t
    } else {
        b.data()
    };

    let mut out = vec![T::ZERO; m * n];
    gemm_accum(a_rows, b_rows, &mut out, m, k, n);
    Tensor::from_vec(&[m, n], out)
}

pub(crate) fn transpose_copy<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

// i-k-j loop order: the inner loop runs over contiguous rows of `b` and
// `c`, which the compiler vectorizes. Accumulates into `c`.
pub(crate) fn gemm_accum<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// Convolution geometry: kernel, stride, and logical zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeom {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        ConvGeom {
            kernel,
            stride,
            pad,
        }
    }

    /// Output spatial size for an input of `(h, w)`; errors unless the
    /// geometry divides evenly.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.pad;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::InvalidShape(
                "kernel and stride must be positive".into(),
            ));
        }
        let h_eff = h + 2 * ph;
        let w_eff = w + 2 * pw;
        if h_eff < kh || w_eff < kw {
            return Err(Error::InvalidShape(format!(
                "kernel {:?} larger than padded input ({h_eff}, {w_eff})",
                self.kernel
            )));
        }
        if !(h_eff - kh).is_multiple_of(sh) || !(w_eff - kw).is_multiple_of(sw) {
            return Err(Error::InvalidShape(format!(
                "stride {:?} does not divide padded input ({h_eff}, {w_eff}) minus kernel {:?}",
                self.stride, self.kernel
            )));
        }
        Ok(((h_eff - kh) / sh + 1, (w_eff - kw) / sw + 1))
    }
}

/// Lower a `[C, H, W]` image into a `[C*kh*kw, Ho*Wo]` column matrix so
/// convolution becomes a single gemm. Padding is read logically as zero.
pub fn im2col<T: Scalar>(input: &Tensor<T>, geom: &ConvGeom) -> Result<Tensor<T>> {
    let &[c, h, w] = input.shape() else {
        return Err(Error::InvalidShape(format!(
            "im2col expects [C, H, W], got {:?}",
            input.shape()
        )));
    };
    let (ho, wo) = geom.output_size(h, w)?;
    let (kh, kw) = geom.kernel;
    let mut cols = vec![T::ZERO; c * kh * kw * ho * wo];
    im2col_into(input.data(), c, h, w, geom, (ho, wo), &mut cols);
    Tensor::from_vec(&[c * kh * kw, ho * wo], cols)
}

/// In-place im2col over a raw `[C, H, W]` slice. `cols` must hold
/// `C*kh*kw * Ho*Wo` elements and is fully overwritten.
pub fn im2col_into<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    geom: &ConvGeom,
    out_size: (usize, usize),
    cols: &mut [T],
) {
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    let (ho, wo) = out_size;
    let cols_w = ho * wo;
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((ci * kh + ki) * kw + kj) * cols_w
                    ..((ci * kh + ki) * kw + kj + 1) * cols_w];
                for oy in 0..ho {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    let out_row = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::ZERO);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            T::ZERO
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter columns back into an image, summing
/// overlapping contributions. Satisfies `<im2col(x), y> == <x, col2im(y)>`.
pub fn col2im<T: Scalar>(
    cols: &Tensor<T>,
    geom: &ConvGeom,
    out_shape: (usize, usize, usize),
) -> Result<Tensor<T>> {
    let (c, h, w) = out_shape;
    let (ho, wo) = geom.output_size(h, w)?;
    let (kh, kw) = geom.kernel;
    let expected = [c * kh * kw, ho * wo];
    if cols.shape() != expected {
        return Err(Error::InvalidShape(format!(
            "col2im expects {expected:?}, got {:?}",
            cols.shape()
        )));
    }
    let mut img = vec![T::ZERO; c * h * w];
    col2im_into(cols.data(), c, h, w, geom, (ho, wo), &mut img);
    Tensor::from_vec(&[c, h, w], img)
}

/// In-place col2im accumulating into `img` (which must be pre-zeroed by
/// the caller when a fresh image is wanted).
pub fn col2im_into<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    geom: &ConvGeom,
    out_size: (usize, usize),
    img: &mut [T],
) {
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    let (ho, wo) = out_size;
    let cols_w = ho * wo;
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row =
                    &cols[((ci * kh + ki) * kw + kj) * cols_w..((ci * kh + ki) * kw + kj + 1) * cols_w];
                for oy in 0..ho {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[base + ix as usize] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}
