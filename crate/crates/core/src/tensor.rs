//! Dense H×W×C tensors, multi-channel "same" convolution and its adjoint,
//! and the soft-thresholding proximal operator.
//!
//! Convolution convention: a [`FilterBank`] holds `k` filters of size
//! `s×s×c_in`. [`conv_same`] maps a `c_in`-channel tensor to `k` channels by
//! cross-correlation (no kernel flip) with zero padding, anchoring each filter
//! at `floor((s-1)/2)`. [`adjoint_conv`] is its exact transpose and maps `k`
//! channels back to `c_in`. Read as a dictionary, `adjoint_conv(bank, U)` is
//! the synthesis `Σ_k d_k * u_k` and `conv_same(bank, R)` is the analysis
//! (transpose) operator.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Floating-point sample type. Implemented for `f32` (training) and `f64`
/// (verification).
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = a · b` for an `m×k` by `k×n` product with arbitrary positive
    /// row and column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        ras: [usize; 2],
        b: &[Self],
        rbs: [usize; 2],
        c: &mut [Self],
        rcs: [usize; 2],
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: [usize; 2]) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * strides[0] + (cols - 1) * strides[1] < len, "gemm operand out of bounds");
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        ras: [usize; 2],
        b: &[Self],
        rbs: [usize; 2],
        c: &mut [Self],
        rcs: [usize; 2],
    ) {
        check_extent(a.len(), m, k, ras);
        check_extent(b.len(), k, n, rbs);
        check_extent(c.len(), m, n, rcs);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: every operand's extent was checked against its slice above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                ras[0] as isize,
                ras[1] as isize,
                b.as_ptr(),
                rbs[0] as isize,
                rbs[1] as isize,
                0.0,
                c.as_mut_ptr(),
                rcs[0] as isize,
                rcs[1] as isize,
            );
        }
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        ras: [usize; 2],
        b: &[Self],
        rbs: [usize; 2],
        c: &mut [Self],
        rcs: [usize; 2],
    ) {
        check_extent(a.len(), m, k, ras);
        check_extent(b.len(), k, n, rbs);
        check_extent(c.len(), m, n, rcs);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: every operand's extent was checked against its slice above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                ras[0] as isize,
                ras[1] as isize,
                b.as_ptr(),
                rbs[0] as isize,
                rbs[1] as isize,
                0.0,
                c.as_mut_ptr(),
                rcs[0] as isize,
                rcs[1] as isize,
            );
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Row-major `(h, w, c)` grid of samples.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        ensure!(
            data.len() == height * width * channels,
            "tensor data length {} != {height}x{width}x{channels}",
            data.len()
        );
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![T::zero(); height * width * channels] }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    data.push(f(i, j, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.height, self.width, self.channels)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    fn index(&self, i: usize, j: usize, c: usize) -> usize {
        (i * self.width + j) * self.channels + c
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> T {
        self.data[self.index(i, j, c)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: T) {
        let idx = self.index(i, j, c);
        self.data[idx] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, a: T) -> Self {
        self.map(|v| v * a)
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: T, other: &Self) -> Result<()> {
        self.check_same(other)?;
        for (d, &o) in self.data.iter_mut().zip(&other.data) {
            *d += a * o;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other)?;
        for (d, &o) in self.data.iter_mut().zip(&other.data) {
            *d += o;
        }
        Ok(())
    }

    pub fn sub_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other)?;
        for (d, &o) in self.data.iter_mut().zip(&other.data) {
            *d -= o;
        }
        Ok(())
    }

    pub fn l1_norm(&self) -> T {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn sq_l2_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same(other)?;
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.data.iter().copied().sum::<T>() / T::lit(self.data.len() as f64)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| !v.is_zero()).count()
    }

    fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        ensure!(self.same_shape(other), "shape mismatch: {:?} vs {:?}", self.shape(), other.shape());
        Ok(())
    }

    /// Stacks `a` and `b` along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        ensure!(
            a.height == b.height && a.width == b.width,
            "spatial mismatch: {}x{} vs {}x{}",
            a.height,
            a.width,
            b.height,
            b.width
        );
        let channels = a.channels + b.channels;
        let mut data = Vec::with_capacity(a.height * a.width * channels);
        for (pa, pb) in a.data.chunks_exact(a.channels.max(1)).zip(b.data.chunks_exact(b.channels.max(1))) {
            data.extend_from_slice(&pa[..a.channels]);
            data.extend_from_slice(&pb[..b.channels]);
        }
        Ok(Self { height: a.height, width: a.width, channels, data })
    }

    /// Splits off the first `first` channels; inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, first: usize) -> Result<(Self, Self)> {
        ensure!(first <= self.channels, "cannot split {} channels at {first}", self.channels);
        let rest = self.channels - first;
        let mut a = Vec::with_capacity(self.height * self.width * first);
        let mut b = Vec::with_capacity(self.height * self.width * rest);
        for px in self.data.chunks_exact(self.channels) {
            a.extend_from_slice(&px[..first]);
            b.extend_from_slice(&px[first..]);
        }
        Ok((
            Self { height: self.height, width: self.width, channels: first, data: a },
            Self { height: self.height, width: self.width, channels: rest, data: b },
        ))
    }

    /// Extracts one channel as a single-channel tensor.
    pub fn channel(&self, c: usize) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        ensure!(
            top + height <= self.height && left + width <= self.width,
            "crop {height}x{width}@({top},{left}) outside {}x{}",
            self.height,
            self.width
        );
        let mut data = Vec::with_capacity(height * width * self.channels);
        for i in top..top + height {
            let start = self.index(i, left, 0);
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(Self { height, width, channels: self.channels, data })
    }
}

/// `k` filters of size `s×s×c_in`, stored as `(k, p, q, c)` row-major.
#[derive(Clone, PartialEq)]
pub struct FilterBank<T> {
    k: usize,
    s: usize,
    c_in: usize,
    data: Vec<T>,
}

impl<T> Debug for FilterBank<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FilterBank")
            .field("k", &self.k)
            .field("s", &self.s)
            .field("c_in", &self.c_in)
            .finish_non_exhaustive()
    }
}

impl<T: Real> FilterBank<T> {
    pub fn new(k: usize, s: usize, c_in: usize, data: Vec<T>) -> Result<Self> {
        ensure!(s >= 1, "filter size must be at least 1");
        ensure!(data.len() == k * s * s * c_in, "filter bank data length {} != {k}x{s}x{s}x{c_in}", data.len());
        Ok(Self { k, s, c_in, data })
    }

    pub fn zeros(k: usize, s: usize, c_in: usize) -> Self {
        Self { k, s, c_in, data: vec![T::zero(); k * s * s * c_in] }
    }

    pub fn from_fn(k: usize, s: usize, c_in: usize, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(k * s * s * c_in);
        for kk in 0..k {
            for p in 0..s {
                for q in 0..s {
                    for c in 0..c_in {
                        data.push(f(kk, p, q, c));
                    }
                }
            }
        }
        Self { k, s, c_in, data }
    }

    /// Filter `i` has a unit tap at the anchor on channel `i % c_in`.
    pub fn delta(k: usize, s: usize, c_in: usize) -> Self {
        let a = anchor(s);
        Self::from_fn(k, s, c_in, |kk, p, q, c| if p == a && q == a && c == kk % c_in { T::one() } else { T::zero() })
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn s(&self) -> usize {
        self.s
    }

    #[inline]
    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.k, self.s, self.s, self.c_in]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, k: usize, p: usize, q: usize, c: usize) -> T {
        self.data[((k * self.s + p) * self.s + q) * self.c_in + c]
    }

    pub fn scale(&self, a: T) -> Self {
        Self { data: self.data.iter().map(|&v| v * a).collect(), ..self.clone() }
    }

    pub fn cast<U: Real>(&self) -> FilterBank<U> {
        FilterBank {
            k: self.k,
            s: self.s,
            c_in: self.c_in,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Channel-wise concatenation of two banks with equal `k` and `s`.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        ensure!(a.k == b.k && a.s == b.s, "banks differ in k or s");
        let c_in = a.c_in + b.c_in;
        let mut data = Vec::with_capacity(a.k * a.s * a.s * c_in);
        for (ta, tb) in a.data.chunks_exact(a.c_in).zip(b.data.chunks_exact(b.c_in)) {
            data.extend_from_slice(ta);
            data.extend_from_slice(tb);
        }
        Ok(Self { k: a.k, s: a.s, c_in, data })
    }

    /// Same filters, permuted so that new filter `i` is old filter `perm[i]`.
    pub fn permute_filters(&self, perm: &[usize]) -> Self {
        let stride = self.s * self.s * self.c_in;
        let mut data = Vec::with_capacity(self.data.len());
        for &src in perm {
            data.extend_from_slice(&self.data[src * stride..(src + 1) * stride]);
        }
        Self { data, ..self.clone() }
    }
}

/// Anchor offset of an `s`-tap filter: `floor((s - 1) / 2)`.
#[inline]
pub fn anchor(s: usize) -> usize {
    (s - 1) / 2
}

/// Patch matrix stored tap-major: plane `(p, q, c)` holds
/// `t[i + d(p), j + d(q), c]` for every pixel `(i, j)` with zero padding, where
/// `d(p) = p − a`. Read with strides `[1, h·w]` it is the `h·w × s·s·c`
/// im2col matrix.
fn im2col<T: Real>(t: &Tensor<T>, s: usize) -> Vec<T> {
    let (h, w, c) = t.shape();
    let hw = h * w;
    let mut out = vec![T::zero(); hw * s * s * c];
    for_each_tap_row(h, w, s, |tap_pq, i, ii, j0, j1, d| {
        for cc in 0..c {
            let plane = &mut out[(tap_pq * c + cc) * hw..(tap_pq * c + cc + 1) * hw];
            let dst = &mut plane[i * w + j0..i * w + j1];
            if c == 1 {
                let start = (ii as isize * w as isize + j0 as isize + d) as usize;
                dst.copy_from_slice(&t.data[start..start + (j1 - j0)]);
            } else {
                for (n, v) in dst.iter_mut().enumerate() {
                    let jj = (j0 as isize + n as isize + d) as usize;
                    *v = t.data[(ii * w + jj) * c + cc];
                }
            }
        }
    });
    out
}

/// Calls `f(p·s + q, i, i + p − a, j0, j1, q − a)` for every tap and output
/// row whose shifted source row is in range; `j0..j1` are the output columns
/// whose source column `j + q − a` is in range.
#[inline]
fn for_each_tap_row(h: usize, w: usize, s: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, isize)) {
    let a = anchor(s) as isize;
    for p in 0..s {
        for q in 0..s {
            let d = q as isize - a;
            let j0 = (-d).max(0) as usize;
            let j1 = (w as isize - d).clamp(0, w as isize) as usize;
            if j0 >= j1 {
                continue;
            }
            for i in 0..h {
                let ii = i as isize + p as isize - a;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                f(p * s + q, i, ii as usize, j0, j1, d);
            }
        }
    }
}

/// Multi-channel cross-correlation with zero "same" padding:
/// `out[i,j,k] = Σ_{p,q,c} bank[k,p,q,c] · t[i+p-a, j+q-a, c]`.
pub fn conv_same<T: Real>(bank: &FilterBank<T>, t: &Tensor<T>) -> Result<Tensor<T>> {
    ensure!(t.channels == bank.c_in, "conv_same: tensor has {} channels, bank expects {}", t.channels, bank.c_in);
    let (h, w, c_in) = t.shape();
    let (k, s) = (bank.k, bank.s);
    let mut out = Tensor::zeros(h, w, k);
    if k == 0 || c_in == 0 || h * w == 0 {
        return Ok(out);
    }
    let taps = s * s * c_in;
    let cols = im2col(t, s);
    T::gemm(h * w, taps, k, &cols, [1, h * w], &bank.data, [1, taps], &mut out.data, [k, 1]);
    Ok(out)
}

/// Exact transpose of [`conv_same`] for the same bank: maps `k` channels to `c_in`,
/// `out[i,j,c] = Σ_{p,q,k} bank[k,p,q,c] · r[i-p+a, j-q+a, k]`.
pub fn adjoint_conv<T: Real>(bank: &FilterBank<T>, r: &Tensor<T>) -> Result<Tensor<T>> {
    ensure!(r.channels == bank.k, "adjoint_conv: tensor has {} channels, bank has {} filters", r.channels, bank.k);
    let (h, w, k) = r.shape();
    let (s, c_in) = (bank.s, bank.c_in);
    let mut out = Tensor::zeros(h, w, c_in);
    if k == 0 || c_in == 0 || h * w == 0 {
        return Ok(out);
    }
    // Plane (p,q,c) of y holds Σ_k r[i,j,k] · bank[k,p,q,c]; each plane is
    // then added back shifted to pixel (i+p-a, j+q-a).
    let taps = s * s * c_in;
    let hw = h * w;
    let mut y = vec![T::zero(); hw * taps];
    T::gemm(hw, k, taps, &r.data, [k, 1], &bank.data, [taps, 1], &mut y, [1, hw]);
    for_each_tap_row(h, w, s, |tap_pq, i, ii, j0, j1, d| {
        for c in 0..c_in {
            let plane = &y[(tap_pq * c_in + c) * hw..(tap_pq * c_in + c + 1) * hw];
            let src = &plane[i * w + j0..i * w + j1];
            if c_in == 1 {
                let start = (ii as isize * w as isize + j0 as isize + d) as usize;
                for (o, &v) in out.data[start..start + (j1 - j0)].iter_mut().zip(src) {
                    *o += v;
                }
            } else {
                for (n, &v) in src.iter().enumerate() {
                    let jj = (j0 as isize + n as isize + d) as usize;
                    out.data[(ii * w + jj) * c_in + c] += v;
                }
            }
        }
    });
    Ok(out)
}

/// Gradient of `⟨g, conv_same(bank, t)⟩` with respect to the bank, where
/// `t` has `c_in` channels and `g` has `k` channels.
///
/// Because `adjoint_conv` is the transpose of `conv_same`, the filter
/// gradient of `⟨h, adjoint_conv(bank, r)⟩` is `filter_grad(h, r, s)`.
pub fn filter_grad<T: Real>(t: &Tensor<T>, g: &Tensor<T>, s: usize) -> Result<FilterBank<T>> {
    ensure!(
        t.height == g.height && t.width == g.width,
        "filter_grad: spatial mismatch {:?} vs {:?}",
        t.shape(),
        g.shape()
    );
    ensure!(s >= 1, "filter size must be at least 1");
    let (h, w, c_in) = t.shape();
    let k = g.channels;
    let mut out = FilterBank::zeros(k, s, c_in);
    if k == 0 || c_in == 0 || h * w == 0 {
        return Ok(out);
    }
    let taps = s * s * c_in;
    let cols = im2col(t, s);
    T::gemm(k, h * w, taps, &g.data, [1, k], &cols, [1, h * w], &mut out.data, [taps, 1]);
    Ok(out)
}

/// Elementwise `sign(t) · max(|t| - θ_c, 0)` with one threshold per channel.
pub fn soft_threshold<T: Real>(t: &Tensor<T>, theta: &[T]) -> Result<Tensor<T>> {
    ensure!(theta.len() == t.channels, "soft_threshold: {} thresholds for {} channels", theta.len(), t.channels);
    ensure!(theta.iter().all(|&th| th >= T::zero()), "soft_threshold: thresholds must be nonnegative");
    let mut out = t.clone();
    if t.channels == 0 {
        return Ok(out);
    }
    for px in out.data.chunks_exact_mut(t.channels) {
        for (v, &th) in px.iter_mut().zip(theta) {
            *v = shrink(*v, th);
        }
    }
    Ok(out)
}

#[inline]
pub fn shrink<T: Real>(v: T, theta: T) -> T {
    let m = v.abs() - theta;
    if m > T::zero() {
        m.copysign(v)
    } else {
        T::zero()
    }
}
