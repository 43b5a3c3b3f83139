//! Dense (B, C, H, W) feature maps, axis subsets, and axis-subset statistics.

use std::fmt;
use std::ops::Index;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Sizes along (batch, channel, height, width).
pub type Dims = [usize; 4];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("dimensions must be positive, got {0:?}")]
    ZeroDim(Dims),
    #[error("data length {actual} does not match dims (expected {expected})")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite entry at index {index:?}")]
    NonFinite { index: Dims },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Dims, right: Dims },
    #[error("statistic of dims {stat:?} cannot broadcast to {target:?}")]
    NotBroadcastable { stat: Dims, target: Dims },
    #[error("division by zero: statistic entry at index {index:?} is zero")]
    DivisionByZero { index: Dims },
    #[error("invalid axis set {0:?}")]
    BadAxisSet(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    Batch = 0,
    Channel = 1,
    Height = 2,
    Width = 3,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Batch, Axis::Channel, Axis::Height, Axis::Width];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        match self {
            Axis::Batch => 'B',
            Axis::Channel => 'C',
            Axis::Height => 'H',
            Axis::Width => 'W',
        }
    }
}

/// A subset of {B, C, H, W}, stored as a 4-bit mask (bit i = axis i).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct AxisSet(u8);

impl AxisSet {
    pub const EMPTY: AxisSet = AxisSet(0);
    pub const B: AxisSet = AxisSet(1);
    pub const C: AxisSet = AxisSet(1 << 1);
    pub const H: AxisSet = AxisSet(1 << 2);
    pub const W: AxisSet = AxisSet(1 << 3);
    pub const SPATIAL: AxisSet = AxisSet(0b1100);
    pub const ALL: AxisSet = AxisSet(0b1111);

    pub const fn from_bits(bits: u8) -> Self {
        AxisSet(bits & 0b1111)
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn union(self, other: AxisSet) -> AxisSet {
        AxisSet(self.0 | other.0)
    }

    pub const fn intersection(self, other: AxisSet) -> AxisSet {
        AxisSet(self.0 & other.0)
    }

    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub const fn is_subset_of(self, other: AxisSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub const fn intersects(self, other: AxisSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn contains(self, axis: Axis) -> bool {
        self.0 & (1 << axis.index()) != 0
    }

    pub fn with(self, axis: Axis) -> AxisSet {
        AxisSet(self.0 | (1 << axis.index()))
    }

    pub fn iter(self) -> impl Iterator<Item = Axis> {
        Axis::ALL.into_iter().filter(move |a| self.contains(*a))
    }

    /// All 16 subsets, ordered by mask value.
    pub fn all_subsets() -> impl Iterator<Item = AxisSet> {
        (0u8..16).map(AxisSet)
    }

    /// Dims of a statistic reduced over `self`: 1 on every reduced axis.
    pub fn reduce_dims(self, dims: Dims) -> Dims {
        let mut out = dims;
        for axis in self.iter() {
            out[axis.index()] = 1;
        }
        out
    }

    /// Number of entries averaged over by a reduction on `self`.
    pub fn count(self, dims: Dims) -> usize {
        self.iter().map(|a| dims[a.index()]).product()
    }
}

impl fmt::Display for AxisSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("-");
        }
        for axis in self.iter() {
            write!(f, "{}", axis.letter())?;
        }
        Ok(())
    }
}

impl fmt::Debug for AxisSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AxisSet({self})")
    }
}

impl From<AxisSet> for String {
    fn from(a: AxisSet) -> String {
        a.to_string()
    }
}

impl TryFrom<String> for AxisSet {
    type Error = TensorError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl FromStr for AxisSet {
    type Err = TensorError;

    /// Accepts "BHW", "B,H,W", "b h w"; "-", "none", "{}" or "" for the empty set.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if matches!(t, "" | "-" | "{}" | "none" | "empty") {
            return Ok(AxisSet::EMPTY);
        }
        let mut set = AxisSet::EMPTY;
        for ch in t.chars() {
            let axis = match ch.to_ascii_uppercase() {
                'B' => Axis::Batch,
                'C' => Axis::Channel,
                'H' => Axis::Height,
                'W' => Axis::Width,
                ',' | ' ' | '{' | '}' | '+' => continue,
                _ => return Err(TensorError::BadAxisSet(s.to_string())),
            };
            set = set.with(axis);
        }
        Ok(set)
    }
}

/// Dense real tensor in C order (w fastest).
#[derive(Clone, PartialEq)]
pub struct FeatureMap<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for FeatureMap<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureMap").field("dims", &self.dims).field("len", &self.data.len()).finish()
    }
}

fn unravel(dims: Dims, mut offset: usize) -> Dims {
    let mut idx = [0; 4];
    for axis in (0..4).rev() {
        idx[axis] = offset % dims[axis];
        offset /= dims[axis];
    }
    idx
}

fn c_strides(dims: Dims) -> [usize; 4] {
    [dims[1] * dims[2] * dims[3], dims[2] * dims[3], dims[3], 1]
}

impl<T: Scalar> FeatureMap<T> {
    /// Validating constructor: positive dims, matching length, finite entries.
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self, TensorError> {
        if dims.contains(&0) {
            return Err(TensorError::ZeroDim(dims));
        }
        let expected = dims.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch { expected, actual: data.len() });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index: unravel(dims, pos) });
        }
        Ok(FeatureMap { dims, data })
    }

    /// Trusted constructor for results computed from valid inputs.
    pub(crate) fn from_parts(dims: Dims, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        FeatureMap { dims, data }
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        assert!(!dims.contains(&0), "dimensions must be positive");
        FeatureMap { dims, data: vec![value; dims.iter().product()] }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(Dims) -> T) -> Self {
        assert!(!dims.contains(&0), "dimensions must be positive");
        let n = dims.iter().product();
        let data = (0..n).map(|i| f(unravel(dims, i))).collect();
        FeatureMap { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
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

    pub fn offset(&self, idx: Dims) -> usize {
        let s = c_strides(self.dims);
        idx[0] * s[0] + idx[1] * s[1] + idx[2] * s[2] + idx[3] * s[3]
    }

    pub fn get(&self, idx: Dims) -> T {
        self.data[self.offset(idx)]
    }

    /// The contiguous H×W plane at (b, c).
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (b * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        FeatureMap { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self, TensorError> {
        if self.dims != other.dims {
            return Err(TensorError::ShapeMismatch { left: self.dims, right: other.dims });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(FeatureMap { dims: self.dims, data })
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap { dims: self.dims, data: self.data.iter().map(|v| U::of(v.to_f64_lossless())).collect() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T, TensorError> {
        if self.dims != other.dims {
            return Err(TensorError::ShapeMismatch { left: self.dims, right: other.dims });
        }
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// Mean of squared entries.
    pub fn mean_square(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>() / T::of_usize(self.data.len())
    }
}

impl<T: Scalar> Index<Dims> for FeatureMap<T> {
    type Output = T;

    fn index(&self, idx: Dims) -> &T {
        &self.data[self.offset(idx)]
    }
}

/// A statistic of a source map, of size 1 along each reduced axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedStat<T> {
    axes: AxisSet,
    values: FeatureMap<T>,
}

impl<T: Scalar> ReducedStat<T> {
    /// Wraps `values`, which must have size 1 along every axis in `axes`.
    pub fn new(axes: AxisSet, values: FeatureMap<T>) -> Result<Self, TensorError> {
        let d = values.dims();
        if axes.iter().any(|a| d[a.index()] != 1) {
            return Err(TensorError::BadAxisSet(format!("statistic dims {d:?} are not reduced over {axes}")));
        }
        Ok(ReducedStat { axes, values })
    }

    pub fn axes(&self) -> AxisSet {
        self.axes
    }

    pub fn values(&self) -> &FeatureMap<T> {
        &self.values
    }

    pub fn into_values(self) -> FeatureMap<T> {
        self.values
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        ReducedStat { axes: self.axes, values: self.values.map(f) }
    }

    /// True if this statistic can be replicated to fill `dims`.
    pub fn broadcasts_to(&self, dims: Dims) -> bool {
        let d = self.values.dims();
        (0..4).all(|i| d[i] == dims[i] || d[i] == 1)
    }

    /// Strides into the statistic, with 0 along replicated axes.
    fn broadcast_strides(&self) -> [usize; 4] {
        let d = self.values.dims();
        let s = c_strides(d);
        let mut out = [0; 4];
        for i in 0..4 {
            out[i] = if d[i] == 1 { 0 } else { s[i] };
        }
        out
    }
}

/// Visits every entry of `dims` in C order along with the broadcast offset into a statistic.
#[inline]
fn for_each_broadcast(dims: Dims, strides: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let mut off = 0;
    for b in 0..dims[0] {
        for c in 0..dims[1] {
            for h in 0..dims[2] {
                let row = b * strides[0] + c * strides[1] + h * strides[2];
                for w in 0..dims[3] {
                    f(off, row + w * strides[3]);
                    off += 1;
                }
            }
        }
    }
}

fn reduced_sum<T: Scalar>(x: &FeatureMap<T>, axes: AxisSet, term: impl Fn(T, usize) -> T) -> ReducedStat<T> {
    let dims = axes.reduce_dims(x.dims());
    let mut acc = ReducedStat { axes, values: FeatureMap::zeros(dims) };
    let strides = acc.broadcast_strides();
    let out = &mut acc.values.data;
    for_each_broadcast(x.dims(), strides, |xi, si| out[si] = out[si] + term(x.data[xi], si));
    acc
}

/// Arithmetic mean of `x` over `axes`. The empty set returns `x` unchanged.
pub fn mean_over<T: Scalar>(x: &FeatureMap<T>, axes: AxisSet) -> ReducedStat<T> {
    if axes.is_empty() {
        return ReducedStat { axes, values: x.clone() };
    }
    let n = T::of_usize(axes.count(x.dims()));
    reduced_sum(x, axes, |v, _| v).map(|s| s / n)
}

/// Biased (divide-by-count) variance of `x` over `axes`, two-pass.
pub fn var_over<T: Scalar>(x: &FeatureMap<T>, axes: AxisSet) -> ReducedStat<T> {
    if axes.is_empty() {
        return ReducedStat { axes, values: FeatureMap::zeros(x.dims()) };
    }
    let mean = mean_over(x, axes);
    let n = T::of_usize(axes.count(x.dims()));
    let m = mean.values.data();
    reduced_sum(x, axes, |v, si| {
        let d = v - m[si];
        d * d
    })
    .map(|s| s / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Entry-wise `x op s`, with `s` replicated along its reduced axes.
pub fn broadcast_combine<T: Scalar>(
    x: &FeatureMap<T>,
    s: &ReducedStat<T>,
    op: CombineOp,
) -> Result<FeatureMap<T>, TensorError> {
    if !s.broadcasts_to(x.dims()) {
        return Err(TensorError::NotBroadcastable { stat: s.values.dims(), target: x.dims() });
    }
    let sv = s.values.data();
    if op == CombineOp::Div {
        if let Some(pos) = sv.iter().position(|v| v.is_zero()) {
            return Err(TensorError::DivisionByZero { index: unravel(s.values.dims(), pos) });
        }
    }
    let mut out = vec![T::zero(); x.len()];
    let strides = s.broadcast_strides();
    for_each_broadcast(x.dims(), strides, |xi, si| {
        let (a, b) = (x.data[xi], sv[si]);
        out[xi] = match op {
            CombineOp::Add => a + b,
            CombineOp::Sub => a - b,
            CombineOp::Mul => a * b,
            CombineOp::Div => a / b,
        };
    });
    Ok(FeatureMap::from_parts(x.dims(), out))
}
