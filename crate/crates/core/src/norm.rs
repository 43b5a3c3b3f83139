//! Axis-parameterized normalization: centering, scaling and an optional affine
//! step, each over its own subset of {B, C, H, W}.
//!
//! `y = gamma * (x - mean_center(x)) / sqrt(var_scale(x) + eps) + beta`
//!
//! The variance is taken over `scale` about the mean over `scale`, independently
//! of the centering axes. An empty `center` skips centering and an empty `scale`
//! skips scaling.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{
    broadcast_combine, mean_over, var_over, AxisSet, CombineOp, Dims, FeatureMap, ReducedStat, TensorError,
};

/// Axes of the per-channel running statistics.
const PER_CHANNEL: AxisSet = AxisSet::from_bits(0b1101);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NormError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown normalization preset {0:?}")]
    UnknownPreset(String),
    #[error("zero variance with eps = 0 at reduced index {index:?}")]
    ZeroVariance { index: Dims },
    #[error("affine parameters do not match the configuration: {0}")]
    ParamMismatch(String),
    #[error("running statistics: {0}")]
    StateMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Training,
    Evaluation,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Training => "training",
            Mode::Evaluation => "evaluation",
        })
    }
}

impl FromStr for Mode {
    type Err = NormError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "training" | "train" => Ok(Mode::Training),
            "evaluation" | "eval" => Ok(Mode::Evaluation),
            other => Err(NormError::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormConfig {
    pub center: AxisSet,
    pub scale: AxisSet,
    /// `None` means no affine step.
    pub affine: Option<AxisSet>,
    pub epsilon: f64,
    pub track_running_stats: bool,
    pub mode: Mode,
}

impl NormConfig {
    /// A layer with the given axes, `eps = 0`, no running statistics.
    pub fn new(center: AxisSet, scale: AxisSet, affine: Option<AxisSet>) -> Self {
        NormConfig { center, scale, affine, epsilon: 0.0, track_running_stats: false, mode: Mode::Evaluation }
    }

    /// Pass-through layer: no centering, no scaling, no affine step.
    pub fn identity() -> Self {
        Self::new(AxisSet::EMPTY, AxisSet::EMPTY, None)
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), NormError> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(NormError::InvalidConfig(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.track_running_stats
            && !(self.center.contains(crate::tensor::Axis::Batch) && self.scale.contains(crate::tensor::Axis::Batch))
        {
            return Err(NormError::InvalidConfig(
                "running statistics need B in both centering and scaling axes".into(),
            ));
        }
        Ok(())
    }

    /// Uses running statistics instead of batch statistics.
    pub fn uses_running_stats(&self) -> bool {
        self.track_running_stats && self.mode == Mode::Evaluation
    }
}

impl fmt::Display for NormConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let affine = self.affine.map_or_else(|| "absent".to_string(), |a| a.to_string());
        write!(f, "center={} scale={} affine={}", self.center, self.scale, affine)
    }
}

/// The five layers, in the order of the classification table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Preset {
    BatchNorm,
    InstanceNorm,
    LayerNormChw,
    LayerNormC,
    LayerNormAf,
}

impl Preset {
    pub const ALL: [Preset; 5] =
        [Preset::BatchNorm, Preset::InstanceNorm, Preset::LayerNormChw, Preset::LayerNormC, Preset::LayerNormAf];

    pub fn name(self) -> &'static str {
        match self {
            Preset::BatchNorm => "BatchNorm",
            Preset::InstanceNorm => "InstanceNorm",
            Preset::LayerNormChw => "LayerNorm-CHW",
            Preset::LayerNormC => "LayerNorm-C",
            Preset::LayerNormAf => "LayerNorm-AF",
        }
    }

    /// Axis triple of the layer; `eps = 1e-5`, training mode.
    pub fn config(self) -> NormConfig {
        let bhw = AxisSet::B.union(AxisSet::SPATIAL);
        let chw = AxisSet::C.union(AxisSet::SPATIAL);
        let (center, scale, affine) = match self {
            Preset::BatchNorm => (bhw, bhw, Some(AxisSet::C)),
            Preset::InstanceNorm => (AxisSet::SPATIAL, AxisSet::SPATIAL, None),
            Preset::LayerNormChw => (chw, chw, Some(chw)),
            Preset::LayerNormC => (AxisSet::C, AxisSet::C, Some(AxisSet::C)),
            Preset::LayerNormAf => (AxisSet::C, chw, Some(AxisSet::C)),
        };
        NormConfig {
            center,
            scale,
            affine,
            epsilon: 1e-5,
            track_running_stats: self == Preset::BatchNorm,
            mode: Mode::Training,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = NormError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "batchnorm" | "bn" => Preset::BatchNorm,
            "instancenorm" | "in" => Preset::InstanceNorm,
            "layernormchw" => Preset::LayerNormChw,
            "layernormc" => Preset::LayerNormC,
            "layernormaf" => Preset::LayerNormAf,
            _ => return Err(NormError::UnknownPreset(s.to_string())),
        })
    }
}

/// Looks up a preset configuration by name (`"LayerNorm-AF"`, `"BatchNorm"`, ...).
pub fn preset(name: &str) -> Result<NormConfig, NormError> {
    name.parse::<Preset>().map(Preset::config)
}

/// `gamma` and `beta`, varying along the affine axes and constant elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams<T> {
    axes: Option<AxisSet>,
    gamma: Option<ReducedStat<T>>,
    beta: Option<ReducedStat<T>>,
}

impl<T: Scalar> AffineParams<T> {
    /// Parameters of a layer without an affine step.
    pub fn none() -> Self {
        AffineParams { axes: None, gamma: None, beta: None }
    }

    /// Shape of gamma/beta for `axes` on data of shape `dims`.
    pub fn shape(axes: AxisSet, dims: Dims) -> Dims {
        complement(axes).reduce_dims(dims)
    }

    /// Explicit parameters; both maps must be of size 1 along every non-affine axis.
    pub fn new(axes: AxisSet, gamma: FeatureMap<T>, beta: FeatureMap<T>) -> Result<Self, NormError> {
        if gamma.dims() != beta.dims() {
            return Err(NormError::ParamMismatch(format!(
                "gamma dims {:?} differ from beta dims {:?}",
                gamma.dims(),
                beta.dims()
            )));
        }
        let rest = complement(axes);
        Ok(AffineParams {
            axes: Some(axes),
            gamma: Some(ReducedStat::new(rest, gamma)?),
            beta: Some(ReducedStat::new(rest, beta)?),
        })
    }

    pub fn axes(&self) -> Option<AxisSet> {
        self.axes
    }

    pub fn gamma(&self) -> Option<&FeatureMap<T>> {
        self.gamma.as_ref().map(ReducedStat::values)
    }

    pub fn beta(&self) -> Option<&FeatureMap<T>> {
        self.beta.as_ref().map(ReducedStat::values)
    }
}

fn complement(axes: AxisSet) -> AxisSet {
    AxisSet::from_bits(!axes.bits())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// gamma = 1, beta = 0.
    Default,
    /// Independent standard normal entries.
    Gaussian,
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitScheme::Default => "default",
            InitScheme::Gaussian => "gaussian",
        })
    }
}

impl FromStr for InitScheme {
    type Err = NormError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "default" => Ok(InitScheme::Default),
            "gaussian" | "normal" => Ok(InitScheme::Gaussian),
            other => Err(NormError::InvalidConfig(format!("unknown init scheme {other:?}"))),
        }
    }
}

/// Affine parameters for `cfg` on data of shape `dims`, deterministic per seed.
pub fn init_params<T: Scalar>(cfg: &NormConfig, dims: Dims, scheme: InitScheme, seed: u64) -> AffineParams<T> {
    init_params_with_rng(cfg, dims, scheme, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn init_params_with_rng<T: Scalar, R: Rng + ?Sized>(
    cfg: &NormConfig,
    dims: Dims,
    scheme: InitScheme,
    rng: &mut R,
) -> AffineParams<T> {
    let Some(axes) = cfg.affine else {
        return AffineParams::none();
    };
    let shape = AffineParams::<T>::shape(axes, dims);
    let (gamma, beta) = match scheme {
        InitScheme::Default => (FeatureMap::filled(shape, T::one()), FeatureMap::zeros(shape)),
        InitScheme::Gaussian => {
            let mut draw = || T::of(rng.sample::<f64, _>(StandardNormal));
            let gamma = FeatureMap::from_fn(shape, |_| draw());
            let beta = FeatureMap::from_fn(shape, |_| draw());
            (gamma, beta)
        }
    };
    AffineParams::new(axes, gamma, beta).expect("shape derived from the affine axes")
}

/// Per-channel running mean/variance for evaluation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
    pub update_count: u64,
}

impl<T: Scalar> RunningStats<T> {
    /// Mean 0, variance 1, momentum 0.1.
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::of(0.1),
            update_count: 0,
        }
    }

    pub fn with_momentum(mut self, momentum: T) -> Self {
        assert!(momentum > T::zero() && momentum < T::one(), "momentum must lie in (0, 1)");
        self.momentum = momentum;
        self
    }

    /// `running <- (1 - momentum) * running + momentum * batch`, per channel.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m = self.momentum;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = (T::one() - m) * *r + m * b;
        }
        self.update_count += 1;
    }

    fn as_stats(&self) -> (ReducedStat<T>, ReducedStat<T>) {
        let c = self.mean.len();
        let mk = |v: &[T]| {
            ReducedStat::new(PER_CHANNEL, FeatureMap::from_parts([1, c, 1, 1], v.to_vec())).expect("per-channel shape")
        };
        (mk(&self.mean), mk(&self.var))
    }
}

/// Applies the layer. `state` must be present exactly when `cfg.track_running_stats`.
///
/// In training mode the current batch statistics normalize `x` and the running
/// statistics are then updated from per-channel statistics over {B, H, W}.
/// In evaluation mode with running statistics, those replace the batch ones.
pub fn normalize<T: Scalar>(
    x: &FeatureMap<T>,
    cfg: &NormConfig,
    params: &AffineParams<T>,
    state: Option<&mut RunningStats<T>>,
) -> Result<FeatureMap<T>, NormError> {
    cfg.validate()?;
    if params.axes != cfg.affine {
        return Err(NormError::ParamMismatch(format!(
            "layer affine axes {:?}, parameters built for {:?}",
            cfg.affine, params.axes
        )));
    }
    let channels = x.dims()[1];
    let (mean, var) = match (cfg.track_running_stats, state) {
        (false, None) => (batch_mean(x, cfg.center), batch_var(x, cfg.scale)),
        (false, Some(_)) => {
            return Err(NormError::StateMismatch("layer does not track running statistics".into()));
        }
        (true, None) => return Err(NormError::StateMismatch("running statistics required".into())),
        (true, Some(st)) => {
            if st.mean.len() != channels || st.var.len() != channels {
                return Err(NormError::StateMismatch(format!(
                    "{} channels in state, {} in input",
                    st.mean.len(),
                    channels
                )));
            }
            match cfg.mode {
                Mode::Evaluation => {
                    let (m, v) = st.as_stats();
                    (Some(m), Some(v))
                }
                Mode::Training => {
                    let bm = mean_over(x, PER_CHANNEL);
                    let bv = var_over(x, PER_CHANNEL);
                    let stats = (batch_mean(x, cfg.center), batch_var(x, cfg.scale));
                    st.update(bm.values().data(), bv.values().data());
                    stats
                }
            }
        }
    };

    let mut y = match &mean {
        Some(m) => broadcast_combine(x, m, CombineOp::Sub)?,
        None => x.clone(),
    };
    if let Some(v) = &var {
        let eps = T::of(cfg.epsilon);
        let std = v.map(|s| (s + eps).sqrt());
        y = broadcast_combine(&y, &std, CombineOp::Div).map_err(|e| match e {
            TensorError::DivisionByZero { index } => NormError::ZeroVariance { index },
            other => other.into(),
        })?;
    }
    if let (Some(g), Some(b)) = (&params.gamma, &params.beta) {
        y = broadcast_combine(&y, g, CombineOp::Mul)?;
        y = broadcast_combine(&y, b, CombineOp::Add)?;
    }
    Ok(y)
}

fn batch_mean<T: Scalar>(x: &FeatureMap<T>, axes: AxisSet) -> Option<ReducedStat<T>> {
    (!axes.is_empty()).then(|| mean_over(x, axes))
}

fn batch_var<T: Scalar>(x: &FeatureMap<T>, axes: AxisSet) -> Option<ReducedStat<T>> {
    (!axes.is_empty()).then(|| var_over(x, axes))
}
