//! Cosine distance between feature maps and the Monte-Carlo equivariance error
//! `E_{x, theta, g}[ d(f(T_g x), T_g f(x)) ]`, reported as mean ± standard error.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::norm::{init_params_with_rng, normalize, InitScheme, Mode, NormConfig, NormError, RunningStats};
use crate::scalar::Scalar;
use crate::tensor::{Dims, FeatureMap};
use crate::transform::Displacement;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("zero-norm channel vector at (b, h, w) = {index:?}")]
    DegeneratePixel { index: [usize; 3] },
    #[error("feature maps differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch(Dims, Dims),
    #[error("no feature maps to sample from")]
    NoMaps,
    #[error("invalid trial plan: {0}")]
    InvalidPlan(String),
    #[error("trial {trial}: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<MetricError>,
    },
    #[error(transparent)]
    Norm(#[from] NormError),
}

/// `1 - mean_{b,h,w} <x_bhw, y_bhw> / (|x_bhw| |y_bhw|)` over channel vectors. Range [0, 2].
pub fn cosine_distance<T: Scalar>(x: &FeatureMap<T>, y: &FeatureMap<T>) -> Result<f64, MetricError> {
    if x.dims() != y.dims() {
        return Err(MetricError::ShapeMismatch(x.dims(), y.dims()));
    }
    let [b, c, h, w] = x.dims();
    let hw = h * w;
    let (xd, yd) = (x.data(), y.data());
    let mut total = 0.0f64;
    for bi in 0..b {
        for p in 0..hw {
            let (mut dot, mut nx, mut ny) = (T::zero(), T::zero(), T::zero());
            for ci in 0..c {
                let off = (bi * c + ci) * hw + p;
                let (u, v) = (xd[off], yd[off]);
                dot = dot + u * v;
                nx = nx + u * u;
                ny = ny + v * v;
            }
            if nx.is_zero() || ny.is_zero() {
                return Err(MetricError::DegeneratePixel { index: [bi, p / w, p % w] });
            }
            total += (dot / (nx.sqrt() * ny.sqrt())).to_f64_lossless();
        }
    }
    Ok(1.0 - total / (b * hw) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    /// Whole-pixel circular shifts, g in {0..H-1} x {0..W-1}.
    Shift,
    /// Sub-pixel translations, g in [0, H) x [0, W).
    Translation,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Shift => "shift",
            Group::Translation => "translation",
        })
    }
}

impl FromStr for Group {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "shift" | "shifts" => Ok(Group::Shift),
            "translation" | "translations" => Ok(Group::Translation),
            other => Err(MetricError::InvalidPlan(format!("unknown group {other:?}"))),
        }
    }
}

/// Uniform displacement for `group` on an H×W grid.
pub fn sample_displacement<T: Scalar, R: Rng + ?Sized>(
    group: Group,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Displacement<T> {
    match group {
        Group::Shift => Displacement::Shift { dh: rng.random_range(0..h) as i64, dw: rng.random_range(0..w) as i64 },
        Group::Translation => Displacement::Translation {
            dh: T::of(rng.random::<f64>() * h as f64),
            dw: T::of(rng.random::<f64>() * w as f64),
        },
    }
}

/// Which of two options each trial may draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mix<A> {
    Only(A),
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub group: Group,
    pub n_trials: usize,
    pub schemes: Mix<InitScheme>,
    /// Only consulted for layers with running statistics.
    pub bn_modes: Mix<Mode>,
    /// Probability of evaluation mode when `bn_modes` is `Both`.
    pub eval_fraction: f64,
    pub seed: u64,
}

impl TrialPlan {
    pub fn new(group: Group, n_trials: usize, seed: u64) -> Self {
        TrialPlan { group, n_trials, schemes: Mix::Both, bn_modes: Mix::Both, eval_fraction: 0.5, seed }
    }

    pub fn with_schemes(mut self, schemes: Mix<InitScheme>) -> Self {
        self.schemes = schemes;
        self
    }

    pub fn with_bn_modes(mut self, modes: Mix<Mode>) -> Self {
        self.bn_modes = modes;
        self
    }

    fn validate(&self) -> Result<(), MetricError> {
        if self.n_trials == 0 {
            return Err(MetricError::InvalidPlan("n_trials must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval_fraction) {
            return Err(MetricError::InvalidPlan(format!("eval_fraction {} outside [0, 1]", self.eval_fraction)));
        }
        Ok(())
    }

    /// Independent rng stream for one trial.
    fn trial_rng(&self, trial: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(trial as u64);
        rng
    }
}

/// Count, mean and sum of squared deviations; merges associatively (Chan et al.).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        let delta = v - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub fn merge(self, other: Moments) -> Moments {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        Moments {
            n,
            mean: self.mean + delta * other.n as f64 / n as f64,
            m2: self.m2 + other.m2 + delta * delta * (self.n as f64 * other.n as f64) / n as f64,
        }
    }

    /// Sample standard deviation over √n; zero for a single trial.
    pub fn stderr(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2 / (self.n - 1) as f64).sqrt() / (self.n as f64).sqrt()
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::default();
        for v in iter {
            m.push(v);
        }
        m
    }
}

/// One (layer, group) cell of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub layer: String,
    pub group: Group,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl ReportCell {
    pub fn from_moments(layer: impl Into<String>, group: Group, m: &Moments) -> Self {
        ReportCell { layer: layer.into(), group, mean: m.mean, stderr: m.stderr(), n: m.n }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub cells: Vec<ReportCell>,
}

impl EquivarianceReport {
    pub fn get(&self, layer: &str, group: Group) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.layer == layer && c.group == group)
    }
}

/// Per-trial distances `d(f(T_g x), T_g f(x))`, in trial order.
pub fn trial_errors<T: Scalar>(
    cfg: &NormConfig,
    maps: &[FeatureMap<T>],
    plan: &TrialPlan,
) -> Result<Vec<f64>, MetricError> {
    plan.validate()?;
    if maps.is_empty() {
        return Err(MetricError::NoMaps);
    }
    cfg.validate()?;
    (0..plan.n_trials)
        .into_par_iter()
        .map(|trial| run_trial(cfg, maps, plan, trial).map_err(|e| MetricError::Trial { trial, source: Box::new(e) }))
        .collect()
}

/// Mean ± standard error of the equivariance error of one layer under one group.
pub fn equivariance_error<T: Scalar>(
    layer: &str,
    cfg: &NormConfig,
    maps: &[FeatureMap<T>],
    plan: &TrialPlan,
) -> Result<ReportCell, MetricError> {
    let errors = trial_errors(cfg, maps, plan)?;
    Ok(ReportCell::from_moments(layer, plan.group, &errors.into_iter().collect()))
}

fn run_trial<T: Scalar>(
    cfg: &NormConfig,
    maps: &[FeatureMap<T>],
    plan: &TrialPlan,
    trial: usize,
) -> Result<f64, MetricError> {
    let mut rng = plan.trial_rng(trial);
    let x = &maps[rng.random_range(0..maps.len())];
    let scheme = match plan.schemes {
        Mix::Only(s) => s,
        Mix::Both => {
            if rng.random_bool(0.5) {
                InitScheme::Gaussian
            } else {
                InitScheme::Default
            }
        }
    };
    let mut layer = *cfg;
    let state = if cfg.track_running_stats {
        layer.mode = match plan.bn_modes {
            Mix::Only(m) => m,
            Mix::Both => {
                if rng.random_bool(plan.eval_fraction) {
                    Mode::Evaluation
                } else {
                    Mode::Training
                }
            }
        };
        Some(running_stats_for(&layer, x)?)
    } else {
        None
    };
    let params = init_params_with_rng(&layer, x.dims(), scheme, &mut rng);
    let [_, _, h, w] = x.dims();
    let g: Displacement<T> = sample_displacement(plan.group, h, w, &mut rng);

    let lhs = normalize(&g.apply(x), &layer, &params, state.clone().as_mut())?;
    let rhs = g.apply(&normalize(x, &layer, &params, state.clone().as_mut())?);
    cosine_distance(&lhs, &rhs)
}

/// Fresh running statistics; in evaluation mode, after one training update on `x`.
fn running_stats_for<T: Scalar>(layer: &NormConfig, x: &FeatureMap<T>) -> Result<RunningStats<T>, MetricError> {
    let mut st = RunningStats::new(x.dims()[1]);
    if layer.mode == Mode::Evaluation {
        let warm = layer.with_mode(Mode::Training);
        let params = crate::norm::init_params(&warm, x.dims(), InitScheme::Default, 0);
        normalize(x, &warm, &params, Some(&mut st))?;
    }
    Ok(st)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::Preset;
    use crate::synth::{gen_maps, Spectrum};

    fn maps(dims: Dims, n: usize, spectrum: Spectrum) -> Vec<FeatureMap<f64>> {
        gen_maps(dims, n, spectrum, 5).unwrap()
    }

    #[test]
    fn cosine_basics() {
        let x = &maps([2, 4, 5, 5], 1, Spectrum::White)[0];
        assert!(cosine_distance(x, x).unwrap().abs() < 1e-15);
        assert!((cosine_distance(x, &x.scale(-1.0)).unwrap() - 2.0).abs() < 1e-15);
        assert!(cosine_distance(x, &x.scale(3.0)).unwrap().abs() < 1e-15);
    }

    #[test]
    fn cosine_degenerate_pixel() {
        let mut data = vec![1.0; 2 * 3 * 2 * 2];
        for c in 0..3 {
            data[(3 + c) * 4 + 2] = 0.0; // b = 1, (h, w) = (1, 0)
        }
        let x = FeatureMap::new([2, 3, 2, 2], data).unwrap();
        assert_eq!(cosine_distance(&x, &x), Err(MetricError::DegeneratePixel { index: [1, 1, 0] }));
    }

    #[test]
    fn shift_on_single_pixel_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let g: Displacement<f64> = sample_displacement(Group::Shift, 1, 1, &mut rng);
            assert_eq!(g, Displacement::Shift { dh: 0, dw: 0 });
        }
    }

    #[test]
    fn shift_draws_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hits = [0usize; 16];
        let n = 10_000;
        for _ in 0..n {
            match sample_displacement::<f64, _>(Group::Shift, 4, 4, &mut rng) {
                Displacement::Shift { dh, dw } => hits[(dh * 4 + dw) as usize] += 1,
                _ => unreachable!(),
            }
        }
        for h in hits {
            assert!((h as f64 / n as f64 - 1.0 / 16.0).abs() < 0.01);
        }
    }

    #[test]
    fn translation_draws_stay_in_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let (dh, dw) = sample_displacement::<f64, _>(Group::Translation, 5, 3, &mut rng).components();
            assert!((0.0..5.0).contains(&dh) && (0.0..3.0).contains(&dw));
        }
    }

    #[test]
    fn moments_merge_matches_sequential() {
        let vals: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin()).collect();
        let all: Moments = vals.iter().copied().collect();
        let a: Moments = vals[..10].iter().copied().collect();
        let b: Moments = vals[10..].iter().copied().collect();
        let m = a.merge(b);
        assert_eq!(m.n, all.n);
        assert!((m.mean - all.mean).abs() < 1e-15);
        assert!((m.m2 - all.m2).abs() < 1e-13);
    }

    #[test]
    fn identity_layer_is_equivariant() {
        let ms = maps([2, 3, 8, 8], 2, Spectrum::White);
        for group in [Group::Shift, Group::Translation] {
            let cell =
                equivariance_error("identity", &NormConfig::identity(), &ms, &TrialPlan::new(group, 16, 3)).unwrap();
            assert!(cell.mean.abs() <= 1e-11, "{group}: {}", cell.mean);
        }
    }

    #[test]
    fn layernorm_chw_breaks_shifts() {
        let ms = maps([2, 4, 8, 8], 2, Spectrum::White);
        let plan = TrialPlan::new(Group::Shift, 32, 4).with_schemes(Mix::Only(InitScheme::Gaussian));
        let cell = equivariance_error("LayerNorm-CHW", &Preset::LayerNormChw.config(), &ms, &plan).unwrap();
        assert!(cell.mean >= 1e-2, "{}", cell.mean);
    }

    #[test]
    fn batchnorm_translation_at_floor() {
        let ms = maps([2, 4, 8, 8], 2, Spectrum::SUB_NYQUIST);
        let cell = equivariance_error(
            "BatchNorm",
            &Preset::BatchNorm.config(),
            &ms,
            &TrialPlan::new(Group::Translation, 32, 5),
        )
        .unwrap();
        assert!(cell.mean <= 1e-10, "{}", cell.mean);
    }

    #[test]
    fn deterministic_per_seed() {
        let ms = maps([2, 4, 8, 8], 3, Spectrum::White);
        let plan = TrialPlan::new(Group::Translation, 24, 9);
        let a = trial_errors(&Preset::LayerNormC.config(), &ms, &plan).unwrap();
        let b = trial_errors(&Preset::LayerNormC.config(), &ms, &plan).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn empty_maps_and_zero_trials_rejected() {
        let cfg = NormConfig::identity();
        let none: Vec<FeatureMap<f64>> = vec![];
        assert_eq!(
            equivariance_error("id", &cfg, &none, &TrialPlan::new(Group::Shift, 1, 0)),
            Err(MetricError::NoMaps)
        );
        let ms = maps([1, 2, 4, 4], 1, Spectrum::White);
        assert!(matches!(
            equivariance_error("id", &cfg, &ms, &TrialPlan::new(Group::Shift, 0, 0)),
            Err(MetricError::InvalidPlan(_))
        ));
    }

    #[test]
    fn trial_errors_are_tagged() {
        // single channel: every pixel of a centered-over-C output is zero
        let cfg = NormConfig::new(crate::tensor::AxisSet::C, crate::tensor::AxisSet::EMPTY, None);
        let ms = maps([1, 1, 4, 4], 1, Spectrum::White);
        let err = equivariance_error("c", &cfg, &ms, &TrialPlan::new(Group::Shift, 3, 0)).unwrap_err();
        assert!(matches!(err, MetricError::Trial { trial: 0, .. }), "{err:?}");
    }
}
