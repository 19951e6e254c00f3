//! Dense rank-4 tensors and the primitive shape, pooling, interpolation and
//! matrix operations the layers are built from.
//!
//! Layout is row-major over `(batch, depth, height, width)`; element
//! `(b, d, h, w)` lives at `((b * n1 + d) * n2 + h) * n3 + w`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (oracles and gradient checks).
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    fn erf(self) -> Self;

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn lit(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

pub type Shape = [usize; 4];

/// Named tensor axis in the `(batch, depth, height, width)` convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Batch,
    Depth,
    Height,
    Width,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::Batch => 0,
            Axis::Depth => 1,
            Axis::Height => 2,
            Axis::Width => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Tensor4<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

fn checked_numel(shape: Shape) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .filter(|&n| n.checked_mul(std::mem::size_of::<f64>()).is_some())
        .ok_or(Error::Size(shape))
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(shape: Shape, fill: T) -> Result<Self> {
        let n = checked_numel(shape)?;
        Ok(Self {
            shape,
            data: vec![fill; n],
        })
    }

    /// Zero tensor for shapes already known to be addressable.
    ///
    /// Panics if the extents overflow; use [`Tensor4::new`] for untrusted
    /// shapes.
    pub fn zeros(shape: Shape) -> Self {
        Self::new(shape, T::zero()).expect("tensor extents overflow")
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        let n = checked_numel(shape)?;
        if data.len() != n {
            return Err(Error::shape(format!(
                "buffer of length {} does not fill shape {:?} ({} elements)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, b: usize, d: usize, h: usize, w: usize) -> usize {
        let [_, n1, n2, n3] = self.shape;
        ((b * n1 + d) * n2 + h) * n3 + w
    }

    /// Inverse of [`Tensor4::offset`].
    pub fn index_of(&self, offset: usize) -> [usize; 4] {
        let [_, n1, n2, n3] = self.shape;
        let w = offset % n3;
        let rest = offset / n3;
        let h = rest % n2;
        let rest = rest / n2;
        [rest / n1, rest % n1, h, w]
    }

    #[inline]
    pub fn at(&self, b: usize, d: usize, h: usize, w: usize) -> T {
        self.data[self.offset(b, d, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, d: usize, h: usize, w: usize) -> &mut T {
        let o = self.offset(b, d, h, w);
        &mut self.data[o]
    }

    /// Contiguous `(b, d, h, ..)` row along the width axis.
    #[inline]
    pub fn row(&self, b: usize, d: usize, h: usize) -> &[T] {
        let o = self.offset(b, d, h, 0);
        &self.data[o..o + self.shape[3]]
    }

    #[inline]
    pub fn row_mut(&mut self, b: usize, d: usize, h: usize) -> &mut [T] {
        let o = self.offset(b, d, h, 0);
        let n = self.shape[3];
        &mut self.data[o..o + n]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if checked_numel(shape)? != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape(other.shape, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn expect_shape(&self, shape: Shape, what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!(
                "{what}: expected shape {:?}, got {:?}",
                shape, self.shape
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Batched matrix product: `(N,1,p,q) x (N,1,q,r) -> (N,1,p,r)`.
pub fn matmul_batched<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, one_a, p, q] = a.shape();
    let [nb, one_b, qb, r] = b.shape();
    if one_a != 1 || one_b != 1 || n != nb || q != qb {
        return Err(Error::shape(format!(
            "matmul_batched: incompatible {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor4::zeros([n, 1, p, r]);
    for s in 0..n {
        for i in 0..p {
            let a_row = a.row(s, 0, i);
            let o = out.offset(s, 0, i, 0);
            let out_row = &mut out.data[o..o + r];
            for (k, &aik) in a_row.iter().enumerate() {
                if aik == T::zero() {
                    continue;
                }
                for (acc, &bkj) in out_row.iter_mut().zip(b.row(s, 0, k)) {
                    *acc += aik * bkj;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`matmul_batched`]: returns `(grad_a, grad_b)`.
pub fn matmul_batched_backward<T: Scalar>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let [n, _, p, q] = a.shape();
    let r = b.shape()[3];
    grad_out.expect_shape([n, 1, p, r], "matmul_batched_backward")?;
    let mut ga = Tensor4::zeros(a.shape());
    let mut gb = Tensor4::zeros(b.shape());
    for s in 0..n {
        for i in 0..p {
            let g_row = grad_out.row(s, 0, i);
            for k in 0..q {
                // dA[i,k] = sum_j dO[i,j] B[k,j]
                let dot: T = g_row
                    .iter()
                    .zip(b.row(s, 0, k))
                    .map(|(&g, &bv)| g * bv)
                    .sum();
                *ga.at_mut(s, 0, i, k) += dot;
                // dB[k,j] += A[i,k] dO[i,j]
                let aik = a.at(s, 0, i, k);
                for (acc, &g) in gb.row_mut(s, 0, k).iter_mut().zip(g_row) {
                    *acc += aik * g;
                }
            }
        }
    }
    Ok((ga, gb))
}

pub fn concat_depth<T: Scalar>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_depth: empty part list"))?;
    let [b, _, h, w] = first.shape();
    let mut depth = 0;
    for p in parts {
        let [pb, pd, ph, pw] = p.shape();
        if (pb, ph, pw) != (b, h, w) {
            return Err(Error::shape(format!(
                "concat_depth: part {:?} does not match {:?} outside depth",
                p.shape(),
                first.shape()
            )));
        }
        depth += pd;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(b * depth * plane);
    for bi in 0..b {
        for p in parts {
            let pd = p.shape()[1];
            let start = bi * pd * plane;
            data.extend_from_slice(&p.data()[start..start + pd * plane]);
        }
    }
    Tensor4::from_vec([b, depth, h, w], data)
}

/// Adjoint of [`concat_depth`]: splits along depth into the given widths.
pub fn split_depth<T: Scalar>(x: &Tensor4<T>, depths: &[usize]) -> Result<Vec<Tensor4<T>>> {
    let [b, d, h, w] = x.shape();
    if depths.iter().sum::<usize>() != d {
        return Err(Error::shape(format!(
            "split_depth: widths {depths:?} do not sum to depth {d}"
        )));
    }
    let plane = h * w;
    let mut parts: Vec<Vec<T>> = depths
        .iter()
        .map(|&pd| Vec::with_capacity(b * pd * plane))
        .collect();
    for bi in 0..b {
        let mut d0 = 0;
        for (part, &pd) in parts.iter_mut().zip(depths) {
            let start = (bi * d + d0) * plane;
            part.extend_from_slice(&x.data()[start..start + pd * plane]);
            d0 += pd;
        }
    }
    parts
        .into_iter()
        .zip(depths)
        .map(|(data, &pd)| Tensor4::from_vec([b, pd, h, w], data))
        .collect()
}

/// Keeps the last `t_keep` steps along the width (time) axis.
pub fn slice_time_last<T: Scalar>(x: &Tensor4<T>, t_keep: usize) -> Result<Tensor4<T>> {
    let [b, d, h, w] = x.shape();
    if t_keep == 0 || t_keep > w {
        return Err(Error::shape(format!(
            "slice_time_last: t_keep {t_keep} outside 1..={w}"
        )));
    }
    let skip = w - t_keep;
    let mut data = Vec::with_capacity(b * d * h * t_keep);
    for row in x.data().chunks_exact(w) {
        data.extend_from_slice(&row[skip..]);
    }
    Tensor4::from_vec([b, d, h, t_keep], data)
}

/// Adjoint of [`slice_time_last`]: zero-pads the dropped prefix.
pub fn slice_time_last_backward<T: Scalar>(grad: &Tensor4<T>, full_w: usize) -> Result<Tensor4<T>> {
    let [b, d, h, w] = grad.shape();
    if w > full_w {
        return Err(Error::shape("slice_time_last_backward: grad wider than input"));
    }
    let skip = full_w - w;
    let mut out = Tensor4::zeros([b, d, h, full_w]);
    for (dst, src) in out
        .data_mut()
        .chunks_exact_mut(full_w)
        .zip(grad.data().chunks_exact(w.max(1)))
    {
        dst[skip..].copy_from_slice(src);
    }
    Ok(out)
}

fn pool_region(i: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let start = (i * n_in) / n_out;
    let end = ((i + 1) * n_in).div_ceil(n_out);
    (start, end)
}

/// Adaptive average pooling of the (height, width) plane to `(out_h, out_w)`.
pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor4<T>, out_h: usize, out_w: usize) -> Result<Tensor4<T>> {
    let [b, d, h, w] = x.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("adaptive_avg_pool: output extents must be >= 1"));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape(format!(
            "adaptive_avg_pool: zero-extent input {:?}",
            x.shape()
        )));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let rows: Vec<_> = (0..out_h).map(|i| pool_region(i, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|j| pool_region(j, w, out_w)).collect();
    let mut out = Tensor4::zeros([b, d, out_h, out_w]);
    let mut strip = vec![T::zero(); w];
    for (dst, src) in out
        .data_mut()
        .chunks_exact_mut(out_h * out_w)
        .zip(x.data().chunks_exact(h * w))
    {
        for (i, &(h0, h1)) in rows.iter().enumerate() {
            strip.fill(T::zero());
            for row in src[h0 * w..h1 * w].chunks_exact(w) {
                for (s, &v) in strip.iter_mut().zip(row) {
                    *s += v;
                }
            }
            for (j, &(w0, w1)) in cols.iter().enumerate() {
                let area = T::lit(((h1 - h0) * (w1 - w0)) as f64);
                dst[i * out_w + j] = strip[w0..w1].iter().copied().sum::<T>() / area;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`adaptive_avg_pool`] for an input of shape `in_shape`.
pub fn adaptive_avg_pool_backward<T: Scalar>(grad: &Tensor4<T>, in_shape: Shape) -> Result<Tensor4<T>> {
    let [b, d, h, w] = in_shape;
    let [gb, gd, out_h, out_w] = grad.shape();
    if (gb, gd) != (b, d) || out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!(
            "adaptive_avg_pool_backward: grad {:?} vs input {:?}",
            grad.shape(),
            in_shape
        )));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(grad.clone());
    }
    let rows: Vec<_> = (0..out_h).map(|i| pool_region(i, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|j| pool_region(j, w, out_w)).collect();
    let mut out = Tensor4::zeros(in_shape);
    let mut strip = vec![T::zero(); w];
    for (dst, src) in out
        .data_mut()
        .chunks_exact_mut(h * w)
        .zip(grad.data().chunks_exact(out_h * out_w))
    {
        for (i, &(h0, h1)) in rows.iter().enumerate() {
            strip.fill(T::zero());
            for (j, &(w0, w1)) in cols.iter().enumerate() {
                let area = T::lit(((h1 - h0) * (w1 - w0)) as f64);
                let g = src[i * out_w + j] / area;
                for s in &mut strip[w0..w1] {
                    *s += g;
                }
            }
            for row in dst[h0 * w..h1 * w].chunks_exact_mut(w) {
                for (o, &s) in row.iter_mut().zip(&strip) {
                    *o += s;
                }
            }
        }
    }
    Ok(out)
}

/// Interpolation taps for half-pixel linear resampling: output `j` reads
/// `(1 - frac) * x[lo] + frac * x[hi]`.
fn resize_taps(w_in: usize, t_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = w_in as f64 / t_out as f64;
    (0..t_out)
        .map(|j| {
            let s = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (w_in - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(w_in - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Linear resampling along time for height-1 tensors (bilinear with a
/// degenerate vertical axis), half-pixel aligned and edge clamped.
pub fn linear_resize_time<T: Scalar>(x: &Tensor4<T>, t_out: usize) -> Result<Tensor4<T>> {
    let [b, d, h, w] = x.shape();
    if h != 1 || w == 0 || t_out == 0 {
        return Err(Error::shape(format!(
            "linear_resize_time: need height 1 and non-empty extents, got {:?} -> {t_out}",
            x.shape()
        )));
    }
    let taps = resize_taps(w, t_out);
    let mut out = Tensor4::zeros([b, d, 1, t_out]);
    for (dst, src) in out
        .data_mut()
        .chunks_exact_mut(t_out)
        .zip(x.data().chunks_exact(w))
    {
        for (o, &(lo, hi, frac)) in dst.iter_mut().zip(&taps) {
            let f = T::lit(frac);
            *o = src[lo] * (T::one() - f) + src[hi] * f;
        }
    }
    Ok(out)
}

/// Adjoint of [`linear_resize_time`] back to input width `w_in`.
pub fn linear_resize_time_backward<T: Scalar>(grad: &Tensor4<T>, w_in: usize) -> Result<Tensor4<T>> {
    let [b, d, h, t_out] = grad.shape();
    if h != 1 || w_in == 0 || t_out == 0 {
        return Err(Error::shape("linear_resize_time_backward: bad extents"));
    }
    let taps = resize_taps(w_in, t_out);
    let mut out = Tensor4::zeros([b, d, 1, w_in]);
    for (dst, src) in out
        .data_mut()
        .chunks_exact_mut(w_in)
        .zip(grad.data().chunks_exact(t_out))
    {
        for (&g, &(lo, hi, frac)) in src.iter().zip(&taps) {
            let f = T::lit(frac);
            dst[lo] += g * (T::one() - f);
            dst[hi] += g * f;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sigmoid,
    Softmax(Axis),
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Softmax along `axis`, max-subtracted.
pub fn softmax<T: Scalar>(x: &Tensor4<T>, axis: Axis) -> Tensor4<T> {
    let mut out = x.clone();
    for_each_lane(x.shape(), axis, |idx| {
        let max = idx
            .clone()
            .map(|o| x.data()[o])
            .fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for o in idx.clone() {
            let e = (x.data()[o] - max).exp();
            out.data[o] = e;
            total += e;
        }
        for o in idx {
            out.data[o] = out.data[o] / total;
        }
    });
    out
}

/// Dot product with eight independent partial sums so the loop
/// vectorizes; the summation order is fixed, so results are reproducible.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    // A plain sequential fold; pairwise trees make LLVM shuffle lanes
    // inside the loop.
    let mut total = acc.iter().copied().fold(T::zero(), |s, v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        total += x * y;
    }
    total
}

/// `dst += alpha * src`.
#[inline]
pub(crate) fn axpy<T: Scalar>(dst: &mut [T], alpha: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Calls `f` once per 1-D lane along `axis`, with an iterator over the
/// lane's buffer offsets.
pub(crate) fn for_each_lane(
    shape: Shape,
    axis: Axis,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    let a = axis.index();
    let extent = shape[a];
    let inner: usize = shape[a + 1..].iter().product();
    let outer: usize = shape[..a].iter().product();
    if extent == 0 {
        return;
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            f((base..base + extent * inner).step_by(inner));
        }
    }
}

pub fn elementwise<T: Scalar>(x: &Tensor4<T>, f: Activation) -> Tensor4<T> {
    match f {
        Activation::Gelu => x.map(gelu),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Softmax(axis) => softmax(x, axis),
    }
}
