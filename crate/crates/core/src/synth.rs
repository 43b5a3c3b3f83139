//! Synthetic feature maps: i.i.d. standard normal entries, optionally low-pass
//! filtered to a radial bandwidth.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Dims, FeatureMap};
use crate::transform::{signed_bin, Fft2};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("bandwidth must lie in (0, 1/2], got {0}")]
    Bandwidth(f64),
    #[error("bad spectrum {0:?}: expected `white` or `lowpass:BW`")]
    Parse(String),
    #[error("dimensions must be positive, got {0:?}")]
    Dims(Dims),
}

/// Spectral shape of generated maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Spectrum {
    White,
    /// Keeps DFT cells with normalized radius strictly below the bandwidth.
    /// `Lowpass(0.5)` removes exactly the Nyquist row, column and corners.
    Lowpass(f64),
}

impl Spectrum {
    /// Nyquist-free noise; the default for equivariance measurements.
    pub const SUB_NYQUIST: Spectrum = Spectrum::Lowpass(0.5);

    fn validate(self) -> Result<(), SynthError> {
        match self {
            Spectrum::White => Ok(()),
            Spectrum::Lowpass(bw) if bw > 0.0 && bw <= 0.5 => Ok(()),
            Spectrum::Lowpass(bw) => Err(SynthError::Bandwidth(bw)),
        }
    }
}

impl fmt::Display for Spectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Spectrum::White => f.write_str("white"),
            Spectrum::Lowpass(bw) => write!(f, "lowpass:{bw}"),
        }
    }
}

impl FromStr for Spectrum {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        if t == "white" {
            return Ok(Spectrum::White);
        }
        let bw = t
            .strip_prefix("lowpass:")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| SynthError::Parse(s.to_string()))?;
        let spec = Spectrum::Lowpass(bw);
        spec.validate()?;
        Ok(spec)
    }
}

/// `n` maps of shape `dims`, deterministic per seed.
pub fn gen_maps<T: Scalar>(
    dims: Dims,
    n: usize,
    spectrum: Spectrum,
    seed: u64,
) -> Result<Vec<FeatureMap<T>>, SynthError> {
    spectrum.validate()?;
    if dims.contains(&0) {
        return Err(SynthError::Dims(dims));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| gen_map_with_rng(dims, spectrum, &mut rng)).collect())
}

/// One map drawn from `rng`. Panics on an invalid bandwidth or zero dims.
pub fn gen_map_with_rng<T: Scalar, R: Rng + ?Sized>(dims: Dims, spectrum: Spectrum, rng: &mut R) -> FeatureMap<T> {
    spectrum.validate().expect("valid spectrum");
    let noise: FeatureMap<f64> = FeatureMap::from_fn(dims, |_| rng.sample(StandardNormal));
    match spectrum {
        Spectrum::White => noise.cast(),
        Spectrum::Lowpass(bw) => lowpass(&noise, bw).cast(),
    }
}

fn lowpass(x: &FeatureMap<f64>, bw: f64) -> FeatureMap<f64> {
    let [_, _, h, w] = x.dims();
    let fft = Fft2::new(h, w);
    let keep: Vec<bool> = (0..h * w)
        .map(|i| {
            let fh = signed_bin(i / w, h) as f64 / h as f64;
            let fw = signed_bin(i % w, w) as f64 / w as f64;
            fh * fh + fw * fw < bw * bw
        })
        .collect();
    let norm = 1.0 / (h * w) as f64;
    let mut out = Vec::with_capacity(x.len());
    for plane in x.data().chunks(h * w) {
        let mut buf = fft.spectrum(plane);
        for (v, &k) in buf.iter_mut().zip(&keep) {
            if !k {
                *v = Complex::new(0.0, 0.0);
            }
        }
        fft.inverse(&mut buf);
        out.extend(buf.iter().map(|v| v.re * norm));
    }
    FeatureMap::from_parts(x.dims(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_spectrum() {
        assert_eq!("white".parse::<Spectrum>().unwrap(), Spectrum::White);
        assert_eq!("lowpass:0.25".parse::<Spectrum>().unwrap(), Spectrum::Lowpass(0.25));
        assert!(matches!("lowpass:0.7".parse::<Spectrum>(), Err(SynthError::Bandwidth(_))));
        assert!(matches!("pink".parse::<Spectrum>(), Err(SynthError::Parse(_))));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_maps::<f64>([2, 3, 8, 8], 3, Spectrum::White, 11).unwrap();
        let b = gen_maps::<f64>([2, 3, 8, 8], 3, Spectrum::White, 11).unwrap();
        assert_eq!(a, b);
        let c = gen_maps::<f64>([2, 3, 8, 8], 3, Spectrum::White, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_maps() {
        assert!(gen_maps::<f64>([1, 1, 4, 4], 0, Spectrum::White, 0).unwrap().is_empty());
    }

    #[test]
    fn sub_nyquist_has_no_nyquist_line() {
        let x = &gen_maps::<f64>([1, 1, 8, 8], 1, Spectrum::SUB_NYQUIST, 3).unwrap()[0];
        let fft = Fft2::new(8, 8);
        let spec = fft.spectrum(x.data());
        for j in 0..8 {
            assert!(spec[4 * 8 + j].norm() < 1e-12);
            assert!(spec[j * 8 + 4].norm() < 1e-12);
        }
    }
}
