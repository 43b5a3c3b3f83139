//! Normalization layers and their equivariance to shifts and translations.
//!
//! A layer is three optional steps — centering, scaling and an affine map —
//! each over a subset of the (B, C, H, W) axes. The crate measures how each
//! choice interacts with whole-pixel shifts and sub-pixel FFT translations:
//! Monte-Carlo errors, an aliasing probe on the radial spectrum, and an
//! exhaustive sweep over all 4352 axis configurations.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`).

pub mod io;
pub mod metrics;
pub mod norm;
pub mod scalar;
pub mod spectral;
pub mod synth;
pub mod tensor;
pub mod transform;
pub mod verify;

pub use metrics::{cosine_distance, equivariance_error, EquivarianceReport, Group, ReportCell, TrialPlan};
pub use norm::{normalize, preset, AffineParams, InitScheme, Mode, NormConfig, Preset, RunningStats};
pub use scalar::Scalar;
pub use spectral::{aliasing_energy, aliasing_probe, radial_psd, RadialPsd};
pub use tensor::{Axis, AxisSet, Dims, FeatureMap};
pub use transform::{shift2d, translate1d, translate2d, upsample2x_sinc, Displacement, Signal1d};
pub use verify::{classify_config, theorem_sweep, EquivarianceClass, SweepRow, Thresholds};

pub type FeatureMapF64 = FeatureMap<f64>;
pub type FeatureMapF32 = FeatureMap<f32>;
pub type AffineParamsF64 = AffineParams<f64>;
pub type AffineParamsF32 = AffineParams<f32>;
pub type RunningStatsF64 = RunningStats<f64>;
pub type RunningStatsF32 = RunningStats<f32>;
pub type Signal1dF64 = Signal1d<f64>;
