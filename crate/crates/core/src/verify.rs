//! Brute-force oracles and the exhaustive configuration sweep.
//!
//! Which layers are equivariant is decided by two predicates: an affine step on
//! a spatial axis breaks shift equivariance, and translation equivariance also
//! needs the scaling statistics to cover both spatial axes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::norm::{init_params_with_rng, normalize, AffineParams, InitScheme, NormConfig, NormError, RunningStats};
use crate::scalar::Scalar;
use crate::synth::{gen_map_with_rng, Spectrum};
use crate::tensor::{AxisSet, Dims, FeatureMap};
use crate::transform::{real_translation_kernel, shift2d, signed_bin, translate2d, Signal1d};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("thresholds must satisfy 0 <= t_lo < t_hi, got ({0}, {1})")]
    Thresholds(f64, f64),
    #[error("kernel entry {k} has magnitude {magnitude}, expected strictly between 0 and 1")]
    DegenerateKernel { k: usize, magnitude: f64 },
    #[error("{0}")]
    Precondition(String),
    #[error("could not draw a map with nonzero variance for `{0}`")]
    ZeroVarianceDraws(String),
    #[error(transparent)]
    Norm(#[from] NormError),
}

/// Strongest equivariance a layer has. Ordered from weakest to strongest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EquivarianceClass {
    Neither,
    Shift,
    Translation,
}

impl EquivarianceClass {
    pub fn is_shift_equivariant(self) -> bool {
        self >= EquivarianceClass::Shift
    }
}

impl fmt::Display for EquivarianceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EquivarianceClass::Neither => "neither",
            EquivarianceClass::Shift => "shift",
            EquivarianceClass::Translation => "translation",
        })
    }
}

impl FromStr for EquivarianceClass {
    type Err = VerifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "neither" => Ok(EquivarianceClass::Neither),
            "shift" => Ok(EquivarianceClass::Shift),
            "translation" => Ok(EquivarianceClass::Translation),
            other => Err(VerifyError::Precondition(format!("unknown class {other:?}"))),
        }
    }
}

/// Predicted class of a layer.
///
/// An empty scale set skips the scaling step; what is left is affine in the
/// input and counts as translation-equivariant.
pub fn classify_config(cfg: &NormConfig) -> EquivarianceClass {
    if cfg.affine.is_some_and(|a| a.intersects(AxisSet::SPATIAL)) {
        EquivarianceClass::Neither
    } else if cfg.scale.is_empty() || AxisSet::SPATIAL.is_subset_of(cfg.scale) {
        EquivarianceClass::Translation
    } else {
        EquivarianceClass::Shift
    }
}

/// Runs the layer on a private copy of `state`, so repeated calls see the same statistics.
fn apply<T: Scalar>(
    x: &FeatureMap<T>,
    cfg: &NormConfig,
    params: &AffineParams<T>,
    state: Option<&RunningStats<T>>,
) -> Result<FeatureMap<T>, NormError> {
    let mut st = state.cloned();
    normalize(x, cfg, params, st.as_mut())
}

/// Max over all H·W integer displacements of `max |f(T_g x) - T_g f(x)|`.
pub fn shift_equivariance_exhaustive<T: Scalar>(
    cfg: &NormConfig,
    params: &AffineParams<T>,
    state: Option<&RunningStats<T>>,
    x: &FeatureMap<T>,
) -> Result<T, NormError> {
    let [_, _, h, w] = x.dims();
    let fx = apply(x, cfg, params, state)?;
    let mut worst = T::zero();
    for dh in 0..h as i64 {
        for dw in 0..w as i64 {
            let lhs = apply(&shift2d(x, dh, dw), cfg, params, state)?;
            worst = worst.max(lhs.max_abs_diff(&shift2d(&fx, dh, dw))?);
        }
    }
    Ok(worst)
}

/// Max over `displacements` of `max |f(T_g x) - T_g f(x)|` for FFT translations.
pub fn translation_equivariance_max<T: Scalar>(
    cfg: &NormConfig,
    params: &AffineParams<T>,
    state: Option<&RunningStats<T>>,
    x: &FeatureMap<T>,
    displacements: &[(T, T)],
) -> Result<T, NormError> {
    let fx = apply(x, cfg, params, state)?;
    let mut worst = T::zero();
    for &(dh, dw) in displacements {
        let lhs = apply(&translate2d(x, dh, dw), cfg, params, state)?;
        worst = worst.max(lhs.max_abs_diff(&translate2d(&fx, dh, dw))?);
    }
    Ok(worst)
}

/// `X_f = sum_k x_k e^{-i 2 pi f k / n}`, evaluated term by term.
pub fn dft_direct(x: &[Complex<f64>]) -> Vec<Complex<f64>> {
    let n = x.len();
    (0..n)
        .map(|f| {
            x.iter()
                .enumerate()
                .map(|(k, &v)| v * Complex::from_polar(1.0, -std::f64::consts::TAU * ((f * k) % n) as f64 / n as f64))
                .sum()
        })
        .collect()
}

/// Inverse of [`dft_direct`], including the `1/n`.
pub fn idft_direct(x: &[Complex<f64>]) -> Vec<Complex<f64>> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(f, &v)| v * Complex::from_polar(1.0, std::f64::consts::TAU * ((f * k) % n) as f64 / n as f64))
                .sum::<Complex<f64>>()
                / n as f64
        })
        .collect()
}

/// Translation of each column through the direct DFT with symmetric bins.
pub fn translate_direct(v: &Signal1d<f64>, g: f64) -> Signal1d<f64> {
    let k = v.len_k();
    let mut out = vec![0.0; k * v.len_d()];
    for d in 0..v.len_d() {
        let col: Vec<Complex<f64>> = v.column(d).into_iter().map(|x| Complex::new(x, 0.0)).collect();
        let spec: Vec<Complex<f64>> = dft_direct(&col)
            .into_iter()
            .enumerate()
            .map(|(f, s)| s * Complex::from_polar(1.0, -std::f64::consts::TAU * signed_bin(f, k) as f64 * g / k as f64))
            .collect();
        for (i, y) in idft_direct(&spec).into_iter().enumerate() {
            out[i * v.len_d() + d] = y.re;
        }
    }
    Signal1d::new(k, v.len_d(), out)
}

/// `(T_g v)_k = sum_j psi_{g, k-j} v_j`: O(K²) circular convolution with the
/// real translation kernel.
pub fn translate_naive<T: Scalar>(v: &Signal1d<T>, g: T) -> Signal1d<T> {
    let (k, d) = (v.len_k(), v.len_d());
    let psi = real_translation_kernel(g, k);
    Signal1d::from_fn(k, d, |i, c| (0..k).map(|j| psi[(i + k - j) % k] * v.at(j, c)).sum())
}

/// `|E[(T_g x)²] - E[x²]|`, with `T_g` the convolution above.
pub fn unitarity_check<T: Scalar>(x: &Signal1d<T>, g: T) -> T {
    (translate_naive(x, g).mean_square() - x.mean_square()).abs()
}

/// 1-D layer on a K×D array: standardize each position across the D columns.
/// `affine_w` selects an affine step over positions.
fn standardize_rows_config(affine_w: bool) -> NormConfig {
    NormConfig::new(AxisSet::C, AxisSet::C, affine_w.then_some(AxisSet::W))
}

/// Each row of `v` centred and divided by its biased standard deviation.
fn standardize_rows(v: &Signal1d<f64>) -> Signal1d<f64> {
    let d = v.len_d() as f64;
    let stats: Vec<(f64, f64)> = (0..v.len_k())
        .map(|k| {
            let row: Vec<f64> = (0..v.len_d()).map(|c| v.at(k, c)).collect();
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
            (mean, var.sqrt())
        })
        .collect();
    Signal1d::from_fn(v.len_k(), v.len_d(), |k, c| (v.at(k, c) - stats[k].0) / stats[k].1)
}

/// Shift counterexample: the error map and the standardized shifted input `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftCounterexample {
    pub g: usize,
    /// `f(T_g x) - T_g f(x)`.
    pub error: Signal1d<f64>,
    /// `T_g x` standardized row by row, computed independently of the layer.
    pub y: Signal1d<f64>,
}

/// Shift counterexample for a random shift `g` in `1..K`.
///
/// The layer standardizes every position across D and multiplies by
/// `gamma_k = [k == 0]`; the input has entries in {-1, 1} with both values
/// in every row. The error is `y_{0d}` on row 0, `-y_{gd}` on row g, zero elsewhere.
pub fn appendixb_shift_counterexample(k: usize, d: usize, seed: u64) -> Result<ShiftCounterexample, VerifyError> {
    if k < 2 || d < 2 {
        return Err(VerifyError::Precondition(format!("need K >= 2 and D >= 2, got K={k}, D={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = rng.random_range(1..k);
    shift_counterexample_at(k, d, g, &mut rng)
}

/// As [`appendixb_shift_counterexample`] with a chosen shift (`g = 0` allowed).
pub fn shift_counterexample_at<R: Rng + ?Sized>(
    k: usize,
    d: usize,
    g: usize,
    rng: &mut R,
) -> Result<ShiftCounterexample, VerifyError> {
    if k < 2 || d < 2 {
        return Err(VerifyError::Precondition(format!("need K >= 2 and D >= 2, got K={k}, D={d}")));
    }
    let mut data = Vec::with_capacity(k * d);
    for _ in 0..k {
        let mut row: Vec<f64> = (0..d).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        // force both signs into the row
        let flip = rng.random_range(0..d);
        let first = if flip == 0 { 1 } else { 0 };
        row[flip] = -row[first];
        data.extend(row);
    }
    let x = Signal1d::new(k, d, data);

    let cfg = standardize_rows_config(true);
    let gamma = FeatureMap::from_fn([1, 1, 1, k], |[_, _, _, i]| if i == 0 { 1.0 } else { 0.0 });
    let params = AffineParams::new(AxisSet::W, gamma, FeatureMap::zeros([1, 1, 1, k]))?;
    let f =
        |s: &Signal1d<f64>| normalize(&s.to_feature_map(), &cfg, &params, None).map(|m| Signal1d::from_feature_map(&m));

    let gi = g as i64;
    let shift = |s: &Signal1d<f64>| Signal1d::from_feature_map(&shift2d(&s.to_feature_map(), 0, gi));
    let shifted = shift(&x);
    let lhs = f(&shifted)?;
    let rhs = shift(&f(&x)?);
    let error = Signal1d::from_fn(k, d, |i, c| lhs.at(i, c) - rhs.at(i, c));
    Ok(ShiftCounterexample { g, error, y: standardize_rows(&shifted) })
}

/// Translation counterexample: measured error, its closed form and the kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationCounterexample {
    pub u: Vec<f64>,
    pub kernel: Vec<f64>,
    pub measured: Signal1d<f64>,
    /// `psi_k (1/|psi_k| - 1) u_d`.
    pub closed_form: Signal1d<f64>,
}

/// Translation counterexample: `x_{kd} = [k == 0] u_d` with `u` of mean 0 and
/// variance 1, standardized across D at every position.
///
/// The zero rows are handled in the `eps -> 0+` limit (they stay zero). For
/// non-integer `g` every kernel magnitude must lie strictly in (0, 1).
pub fn appendixb_translation_counterexample(
    k: usize,
    d: usize,
    g: f64,
    seed: u64,
) -> Result<TranslationCounterexample, VerifyError> {
    if k < 2 || d < 2 {
        return Err(VerifyError::Precondition(format!("need K >= 2 and D >= 2, got K={k}, D={d}")));
    }
    let kernel = real_translation_kernel(g, k);
    if g.fract() != 0.0 {
        if let Some((i, m)) = kernel.iter().map(|p| p.abs()).enumerate().find(|&(_, m)| m == 0.0 || m >= 1.0) {
            return Err(VerifyError::DegenerateKernel { k: i, magnitude: m });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let mean = raw.iter().sum::<f64>() / d as f64;
    let sd = (raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64).sqrt();
    let u: Vec<f64> = raw.iter().map(|v| (v - mean) / sd).collect();
    let x = Signal1d::from_fn(k, d, |i, c| if i == 0 { u[c] } else { 0.0 });

    let cfg = standardize_rows_config(false).with_epsilon(f64::MIN_POSITIVE);
    let params = AffineParams::none();
    let f =
        |s: &Signal1d<f64>| normalize(&s.to_feature_map(), &cfg, &params, None).map(|m| Signal1d::from_feature_map(&m));
    // the convolution form is exact for integer g; FFT round-off in the zero
    // rows would otherwise be blown up by the standardization
    let lhs = f(&translate_naive(&x, g))?;
    let rhs = translate_naive(&f(&x)?, g);
    let measured = Signal1d::from_fn(k, d, |i, c| lhs.at(i, c) - rhs.at(i, c));
    let closed_form = Signal1d::from_fn(k, d, |i, c| {
        let p = kernel[i];
        if p == 0.0 {
            0.0
        } else {
            p * (1.0 / p.abs() - 1.0) * u[c]
        }
    });
    Ok(TranslationCounterexample { u, kernel, measured, closed_form })
}

/// Decision thresholds: `<= lo` counts as equivariant, `>= hi` as not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub lo: f64,
    pub hi: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { lo: 1e-8, hi: 1e-4 }
    }
}

impl Thresholds {
    pub fn new(lo: f64, hi: f64) -> Result<Self, VerifyError> {
        if !(lo >= 0.0 && lo < hi) {
            return Err(VerifyError::Thresholds(lo, hi));
        }
        Ok(Thresholds { lo, hi })
    }

    /// `None` when an error falls between the thresholds.
    pub fn classify(&self, shift_err: f64, translation_err: f64) -> Option<EquivarianceClass> {
        if shift_err >= self.hi {
            Some(EquivarianceClass::Neither)
        } else if shift_err > self.lo {
            None
        } else if translation_err <= self.lo {
            Some(EquivarianceClass::Translation)
        } else if translation_err >= self.hi {
            Some(EquivarianceClass::Shift)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub center: AxisSet,
    pub scale: AxisSet,
    pub affine: Option<AxisSet>,
    pub predicted: EquivarianceClass,
    pub shift_error: f64,
    pub translation_error: f64,
    /// `None` when indeterminate.
    pub measured: Option<EquivarianceClass>,
}

impl SweepRow {
    pub fn agrees(&self) -> bool {
        self.measured == Some(self.predicted)
    }

    pub fn config(&self) -> NormConfig {
        NormConfig::new(self.center, self.scale, self.affine)
    }
}

/// All 16 × 16 × 17 (center, scale, affine) configurations, in sweep order:
/// center varies fastest, then scale, then affine (absent first).
pub fn sweep_configs() -> Vec<NormConfig> {
    let affines = std::iter::once(None).chain(AxisSet::all_subsets().map(Some));
    affines
        .flat_map(|a| {
            AxisSet::all_subsets().flat_map(move |s| AxisSet::all_subsets().map(move |c| NormConfig::new(c, s, a)))
        })
        .collect()
}

const SWEEP_TRANSLATIONS: usize = 3;
const MAX_REDRAWS: usize = 16;

/// Maps measured per configuration by default. A single map occasionally has
/// nearly equal statistics wherever a translation mixes them, which hides a
/// real translation error below the upper threshold.
pub const DEFAULT_SWEEP_MAPS: usize = 4;

/// Measures every configuration on `maps_per_config` random sub-Nyquist maps
/// with Gaussian affine parameters and `eps = 0`, keeping the largest
/// scale-relative errors.
/// Row `i` draws from its own rng stream.
pub fn theorem_sweep(
    dims: Dims,
    maps_per_config: usize,
    seed: u64,
    thresholds: Thresholds,
) -> Result<Vec<SweepRow>, VerifyError> {
    Thresholds::new(thresholds.lo, thresholds.hi)?;
    if dims.contains(&0) {
        return Err(VerifyError::Precondition(format!("dimensions must be positive, got {dims:?}")));
    }
    if maps_per_config == 0 {
        return Err(VerifyError::Precondition("need at least one map per configuration".into()));
    }
    sweep_configs()
        .into_par_iter()
        .enumerate()
        .map(|(i, cfg)| sweep_row(i, &cfg, dims, maps_per_config, seed, thresholds))
        .collect()
}

fn sweep_row(
    i: usize,
    cfg: &NormConfig,
    dims: Dims,
    n_maps: usize,
    seed: u64,
    th: Thresholds,
) -> Result<SweepRow, VerifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    let [_, _, h, w] = dims;
    let params = init_params_with_rng::<f64, _>(cfg, dims, InitScheme::Gaussian, &mut rng);
    let displacements: Vec<(f64, f64)> = (0..SWEEP_TRANSLATIONS)
        .map(|_| {
            let dh = rng.random_range(0..h) as f64 + rng.random_range(0.1..0.9);
            let dw = rng.random_range(0..w) as f64 + rng.random_range(0.1..0.9);
            (dh, dw)
        })
        .collect();
    let (mut shift_error, mut translation_error) = (0.0f64, 0.0f64);
    for _ in 0..n_maps {
        let (s, t) = measure_one(cfg, &params, dims, &displacements, &mut rng)?;
        shift_error = shift_error.max(s);
        translation_error = translation_error.max(t);
    }
    Ok(SweepRow {
        center: cfg.center,
        scale: cfg.scale,
        affine: cfg.affine,
        predicted: classify_config(cfg),
        shift_error,
        translation_error,
        measured: th.classify(shift_error, translation_error),
    })
}

/// Shift and translation error on one map, relative to the output scale
/// `max(1, max |f(x)|)`, redrawing maps with a zero variance.
///
/// Scaling over a short axis (e.g. two batch entries) can divide by a tiny
/// standard deviation; round-off in the statistics then grows with the output.
fn measure_one<R: Rng>(
    cfg: &NormConfig,
    params: &AffineParams<f64>,
    dims: Dims,
    displacements: &[(f64, f64)],
    rng: &mut R,
) -> Result<(f64, f64), VerifyError> {
    for _ in 0..MAX_REDRAWS {
        let x: FeatureMap<f64> = gen_map_with_rng(dims, Spectrum::SUB_NYQUIST, rng);
        let measured = shift_equivariance_exhaustive(cfg, params, None, &x)
            .and_then(|s| translation_equivariance_max(cfg, params, None, &x, displacements).map(|t| (s, t)));
        match measured {
            Ok((s, t)) => {
                let scale = apply(&x, cfg, params, None)?.max_abs().max(1.0);
                return Ok((s / scale, t / scale));
            }
            Err(NormError::ZeroVariance { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(VerifyError::ZeroVarianceDraws(cfg.to_string()))
}
