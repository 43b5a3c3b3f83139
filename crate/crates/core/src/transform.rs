//! Circular shifts, FFT sub-pixel translations, sinc upsampling and the
//! closed-form 1-D translation kernel.
//!
//! Frequencies use the symmetric convention: bin `k` of an axis of length `n`
//! stands for `k` when `k <= n/2` and for `k - n` otherwise. Translations take
//! the real part after the inverse transform. On an even-length axis the Nyquist
//! bin only picks up `cos(pi g)` of its phase, so energy preservation and the
//! additive group law are exact only for signals without Nyquist content (and
//! always for odd lengths). Integer displacements are exact permutations either way.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Scalar;
use crate::tensor::{Dims, FeatureMap};

/// A 2-D displacement `g = (dh, dw)`: integer pixels for a shift, real for a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Displacement<T> {
    Shift { dh: i64, dw: i64 },
    Translation { dh: T, dw: T },
}

impl<T: Scalar> Displacement<T> {
    pub fn components(&self) -> (T, T) {
        match *self {
            Displacement::Shift { dh, dw } => (T::of(dh as f64), T::of(dw as f64)),
            Displacement::Translation { dh, dw } => (dh, dw),
        }
    }

    pub fn is_shift(&self) -> bool {
        matches!(self, Displacement::Shift { .. })
    }

    /// `T_g x`: a permutation for shifts, a phase ramp for translations.
    pub fn apply(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        match *self {
            Displacement::Shift { dh, dw } => shift2d(x, dh, dw),
            Displacement::Translation { dh, dw } => translate2d(x, dh, dw),
        }
    }
}

/// `out[b,c,h,w] = x[b,c,(h-dh) mod H,(w-dw) mod W]`.
pub fn shift2d<T: Scalar>(x: &FeatureMap<T>, dh: i64, dw: i64) -> FeatureMap<T> {
    let [b, c, h, w] = x.dims();
    let sh = dh.rem_euclid(h as i64) as usize;
    let sw = dw.rem_euclid(w as i64) as usize;
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..h {
            let si = (i + h - sh) % h;
            for j in 0..w {
                out.push(src[base + si * w + (j + w - sw) % w]);
            }
        }
    }
    FeatureMap::from_parts(x.dims(), out)
}

/// Signed frequency of bin `k` on an axis of length `n`.
pub(crate) fn signed_bin(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// `e^{-i 2 pi f_k d}` for every bin of an axis of length `n`.
fn phase_ramp<T: Scalar>(n: usize, d: T) -> Vec<Complex<T>> {
    (0..n)
        .map(|k| {
            let mut t = T::of(signed_bin(k, n) as f64) * d / T::of_usize(n);
            t = t - t.round();
            let angle = -T::TAU() * t;
            Complex::new(angle.cos(), angle.sin())
        })
        .collect()
}

/// Row/column FFT plans for one plane size.
pub(crate) struct Fft2<T: Scalar> {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Scalar> Fft2<T> {
    pub(crate) fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    fn run(&self, buf: &mut [Complex<T>], inverse: bool) {
        let (rows, cols) = if inverse { (&self.row_inv, &self.col_inv) } else { (&self.row_fwd, &self.col_fwd) };
        rows.process(buf);
        let mut t = transpose(buf, self.h, self.w);
        cols.process(&mut t);
        let back = transpose(&t, self.w, self.h);
        buf.copy_from_slice(&back);
    }

    /// Unnormalized forward 2-D DFT of an H×W row-major plane.
    pub(crate) fn forward(&self, buf: &mut [Complex<T>]) {
        self.run(buf, false);
    }

    /// Unnormalized inverse 2-D DFT (caller divides by H·W).
    pub(crate) fn inverse(&self, buf: &mut [Complex<T>]) {
        self.run(buf, true);
    }

    pub(crate) fn spectrum(&self, plane: &[T]) -> Vec<Complex<T>> {
        let mut buf: Vec<Complex<T>> = plane.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.forward(&mut buf);
        buf
    }
}

fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(src[i * cols + j]);
        }
    }
    out
}

/// Sub-pixel circular translation through the 2-D DFT.
pub fn translate2d<T: Scalar>(x: &FeatureMap<T>, dh: T, dw: T) -> FeatureMap<T> {
    translate2d_with_residual(x, dh, dw).0
}

/// Like [`translate2d`], also returning the largest discarded imaginary part.
pub fn translate2d_with_residual<T: Scalar>(x: &FeatureMap<T>, dh: T, dw: T) -> (FeatureMap<T>, T) {
    let [_, _, h, w] = x.dims();
    let fft = Fft2::new(h, w);
    let ramp_h = phase_ramp(h, dh);
    let ramp_w = phase_ramp(w, dw);
    let norm = T::one() / T::of_usize(h * w);
    let mut residual = T::zero();
    let mut out = Vec::with_capacity(x.len());
    for plane in x.data().chunks(h * w) {
        let mut buf = fft.spectrum(plane);
        for (i, row) in buf.chunks_mut(w).enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * ramp_h[i] * ramp_w[j];
            }
        }
        fft.inverse(&mut buf);
        for v in buf {
            residual = residual.max((v.im * norm).abs());
            out.push(v.re * norm);
        }
    }
    (FeatureMap::from_parts(x.dims(), out), residual)
}

/// A K×D array: K spatial positions (rows) by D batch/channel columns, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal1d<T> {
    k: usize,
    d: usize,
    data: Vec<T>,
}

impl<T: Scalar> Signal1d<T> {
    pub fn new(k: usize, d: usize, data: Vec<T>) -> Self {
        assert!(k > 0 && d > 0, "K and D must be positive");
        assert_eq!(data.len(), k * d, "data length must be K*D");
        Signal1d { k, d, data }
    }

    pub fn from_fn(k: usize, d: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(k * d);
        for i in 0..k {
            for j in 0..d {
                data.push(f(i, j));
            }
        }
        Signal1d::new(k, d, data)
    }

    pub fn len_k(&self) -> usize {
        self.k
    }

    pub fn len_d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn at(&self, k: usize, d: usize) -> T {
        self.data[k * self.d + d]
    }

    pub fn column(&self, d: usize) -> Vec<T> {
        (0..self.k).map(|k| self.at(k, d)).collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!((self.k, self.d), (other.k, other.d));
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn mean_square(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>() / T::of_usize(self.data.len())
    }

    /// Copy with the Nyquist component of every column removed (a no-op for odd K).
    /// Translations of the result are exactly norm-preserving.
    pub fn without_nyquist(&self) -> Self {
        if self.k % 2 == 1 {
            return self.clone();
        }
        let sign = |i: usize| if i.is_multiple_of(2) { T::one() } else { -T::one() };
        let kk = T::of_usize(self.k);
        let nyq: Vec<T> = (0..self.d).map(|c| (0..self.k).map(|i| sign(i) * self.at(i, c)).sum::<T>() / kk).collect();
        Signal1d::from_fn(self.k, self.d, |i, c| self.at(i, c) - sign(i) * nyq[c])
    }

    /// As a (1, D, 1, K) feature map: channels carry D, width carries K.
    pub fn to_feature_map(&self) -> FeatureMap<T> {
        let (k, d) = (self.k, self.d);
        FeatureMap::from_fn([1, d, 1, k], |[_, c, _, w]| self.at(w, c))
    }

    /// Inverse of [`Signal1d::to_feature_map`].
    pub fn from_feature_map(x: &FeatureMap<T>) -> Self {
        let [b, d, h, k] = x.dims();
        assert!(b == 1 && h == 1, "expected a (1, D, 1, K) map");
        Signal1d::from_fn(k, d, |i, j| x[[0, j, 0, i]])
    }
}

/// 1-D analogue of [`translate2d`] along the K axis, column by column.
pub fn translate1d<T: Scalar>(v: &Signal1d<T>, g: T) -> Signal1d<T> {
    let k = v.k;
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(k);
    let inv = planner.plan_fft_inverse(k);
    let ramp = phase_ramp(k, g);
    let norm = T::one() / T::of_usize(k);
    let mut out = vec![T::zero(); v.data.len()];
    for d in 0..v.d {
        let mut buf: Vec<Complex<T>> = v.column(d).into_iter().map(|x| Complex::new(x, T::zero())).collect();
        fwd.process(&mut buf);
        for (b, r) in buf.iter_mut().zip(&ramp) {
            *b = *b * *r;
        }
        inv.process(&mut buf);
        for (i, c) in buf.iter().enumerate() {
            out[i * v.d + d] = c.re * norm;
        }
    }
    Signal1d { k, d: v.d, data: out }
}

/// Entries `phi_{g,k}`, k = 0..K-1, of a circular convolution kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexKernel1D<T> {
    pub g: T,
    pub entries: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexKernel1D<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn energy(&self) -> T {
        self.entries.iter().map(|c| c.norm_sqr()).sum()
    }
}

fn is_integer<T: Scalar>(g: T) -> bool {
    g == g.round()
}

/// `g mod K` in `[0, K)`. Both kernels are K-periodic in `g`; reducing first
/// keeps `sin(pi t)` accurate for large displacements.
fn reduce_mod<T: Scalar>(g: T, k: usize) -> T {
    let kk = T::of_usize(k);
    g - (g / kk).floor() * kk
}

fn kronecker<T: Scalar>(g: T, k: usize) -> usize {
    (g.to_i64().expect("integer displacement fits in i64")).rem_euclid(k as i64) as usize
}

/// Dirichlet ratio `sin(pi t) / (K sin(pi t / K))` for non-integer `t`.
fn dirichlet<T: Scalar>(t: T, k: usize) -> T {
    let kk = T::of_usize(k);
    (T::PI() * t).sin() / (kk * (T::PI() * t / kk).sin())
}

/// The translation kernel with the frequency window `0..K-1`:
///
/// `phi_{g,k} = (1/K) sin(pi(g-k)) / sin(pi(g-k)/K) * e^{-i pi (g-k)(1-1/K)}`
/// for non-integer `g`, and the Kronecker delta at `g mod K` otherwise.
/// It is the inverse DFT of the ramp `e^{-i 2 pi k g / K}` over bins `k = 0..K-1`.
pub fn translation_kernel<T: Scalar>(g: T, k: usize) -> ComplexKernel1D<T> {
    assert!(k >= 1, "kernel length must be positive");
    let mut entries = vec![Complex::new(T::zero(), T::zero()); k];
    if is_integer(g) {
        entries[kronecker(g, k)] = Complex::new(T::one(), T::zero());
        return ComplexKernel1D { g, entries };
    }
    let kk = T::of_usize(k);
    let r = reduce_mod(g, k);
    for (i, e) in entries.iter_mut().enumerate() {
        let t = r - T::of_usize(i);
        let mag = dirichlet(t, k);
        let angle = -T::PI() * t * (T::one() - T::one() / kk);
        *e = Complex::new(mag * angle.cos(), mag * angle.sin());
    }
    ComplexKernel1D { g, entries }
}

/// Real convolution kernel of [`translate1d`].
///
/// This is `phi_{g,k}` with its frequency window re-centred from `0..K-1` onto
/// the symmetric band starting at `-floor((K-1)/2)`, real part taken:
/// `psi_{g,k} = Re(phi_{g,k} e^{i 2 pi s (g-k)/K})`, `s = floor((K-1)/2)`.
/// For odd K this is the real Dirichlet kernel; for even K the Nyquist term
/// contributes `cos(pi (g-k) / K)`.
pub fn real_translation_kernel<T: Scalar>(g: T, k: usize) -> Vec<T> {
    let phi = translation_kernel(g, k);
    if is_integer(g) {
        return phi.entries.iter().map(|c| c.re).collect();
    }
    let s = T::of_usize((k - 1) / 2);
    let kk = T::of_usize(k);
    let g = reduce_mod(g, k);
    phi.entries
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let t = g - T::of_usize(i);
            let angle = T::TAU() * s * t / kk;
            (*p * Complex::new(angle.cos(), angle.sin())).re
        })
        .collect()
}

/// Destination bins (and weights) of source bin `k` when an axis of length `n`
/// is zero-padded to `2n`; the Nyquist bin of an even axis is split in half.
fn upsample_slots(k: usize, n: usize) -> [(usize, f64); 2] {
    if n.is_multiple_of(2) && k == n / 2 {
        [(n / 2, 0.5), (3 * n / 2, 0.5)]
    } else if k <= n / 2 {
        [(k, 1.0), (usize::MAX, 0.0)]
    } else {
        [(k + n, 1.0), (usize::MAX, 0.0)]
    }
}

/// ×2 ideal (sinc) upsampling by Fourier zero-padding: (B, C, H, W) → (B, C, 2H, 2W).
pub fn upsample2x_sinc<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let [b, c, h, w] = x.dims();
    let (h2, w2) = (2 * h, 2 * w);
    let small = Fft2::new(h, w);
    let big = Fft2::new(h2, w2);
    // ifft over 2H×2W divides by 4HW; the ×4 gain leaves 1/(HW)
    let norm = T::one() / T::of_usize(h * w);
    let mut out = Vec::with_capacity(4 * x.len());
    for plane in x.data().chunks(h * w) {
        let spec = small.spectrum(plane);
        let mut padded = vec![Complex::new(T::zero(), T::zero()); h2 * w2];
        for i in 0..h {
            let rows = upsample_slots(i, h);
            for j in 0..w {
                let cols = upsample_slots(j, w);
                let v = spec[i * w + j];
                for &(ri, rw) in rows.iter().filter(|s| s.1 > 0.0) {
                    for &(cj, cw) in cols.iter().filter(|s| s.1 > 0.0) {
                        padded[ri * w2 + cj] = padded[ri * w2 + cj] + v * T::of(rw * cw);
                    }
                }
            }
        }
        big.inverse(&mut padded);
        out.extend(padded.iter().map(|v| v.re * norm));
    }
    let dims: Dims = [b, c, h2, w2];
    FeatureMap::from_parts(dims, out)
}
