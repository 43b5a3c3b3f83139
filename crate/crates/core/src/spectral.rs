//! Radial power spectral density and the aliasing probe.
//!
//! After ×2 sinc upsampling a map has no energy above radius √2/4. A layer that
//! keeps that band `(√2/4, 1/2]` empty adds no bandwidth; one that fills it aliases.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::norm::{normalize, AffineParams, NormConfig, NormError, RunningStats};
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;
use crate::transform::{signed_bin, upsample2x_sinc, Fft2};
use crate::verify::{classify_config, EquivarianceClass};

/// Default number of radial bins.
pub const DEFAULT_BINS: usize = 64;

/// √2/4, the edge of the band an upsampled map occupies.
pub const BAND_LO: f64 = std::f64::consts::SQRT_2 / 4.0;
pub const BAND_HI: f64 = 0.5;
pub const R_MAX: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpectralError {
    #[error("no feature maps given")]
    NoMaps,
    #[error("maps differ in spatial size: {0}x{1} vs {2}x{3}")]
    MixedSizes(usize, usize, usize, usize),
    #[error("need at least 2 radial bins, got {0}")]
    TooFewBins(usize),
    #[error("bin edges do not include both √2/4 and 1/2")]
    MisalignedBins,
    #[error("layer `{0}` is not shift-equivariant; the aliasing probe does not apply")]
    NotShiftEquivariant(String),
    #[error(transparent)]
    Norm(#[from] NormError),
}

/// Per-bin mean power over normalized radial frequency `[0, √2/2]`.
///
/// Bin `i` holds cells with `edges[i] < r <= edges[i + 1]` (the first bin also
/// takes `r = 0`). `power` is `|X|²/(HW)` averaged over the bin's cells, all
/// slices and all maps; `counts` is the number of cells per slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialPsd {
    pub edges: Vec<f64>,
    pub power: Vec<f64>,
    pub counts: Vec<usize>,
    /// Index range of the bins that tile `(√2/4, 1/2]`, if the edges align.
    band: Option<(usize, usize)>,
}

impl RadialPsd {
    pub fn n_bins(&self) -> usize {
        self.power.len()
    }

    /// Bins covering exactly `(√2/4, 1/2]`, as a range of indices.
    pub fn band_bins(&self) -> Option<std::ops::Range<usize>> {
        self.band.map(|(a, b)| a..b)
    }
}

/// Bin edges with `√2/4` and `1/2` forced in. Bins are spread over the three
/// segments in proportion to their length, at least one each.
/// Fewer than three bins cannot honour both edges and fall back to uniform.
pub fn bin_edges(n_bins: usize) -> Result<(Vec<f64>, [usize; 3]), SpectralError> {
    if n_bins < 2 {
        return Err(SpectralError::TooFewBins(n_bins));
    }
    let bounds = [0.0, BAND_LO, BAND_HI, R_MAX];
    if n_bins < 3 {
        let edges = (0..=n_bins).map(|i| R_MAX * i as f64 / n_bins as f64).collect();
        return Ok((edges, [0; 3]));
    }
    let lens = [BAND_LO, BAND_HI - BAND_LO, R_MAX - BAND_HI];
    let shares: Vec<f64> = lens.iter().map(|l| n_bins as f64 * l / R_MAX).collect();
    let mut alloc: [usize; 3] = std::array::from_fn(|i| (shares[i].floor() as usize).max(1));
    while alloc.iter().sum::<usize>() > n_bins {
        let i = (0..3).max_by_key(|&i| alloc[i]).unwrap();
        alloc[i] -= 1;
    }
    // largest remainder
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (shares[b] - shares[b].floor()).total_cmp(&(shares[a] - shares[a].floor())));
    let mut left = n_bins - alloc.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        alloc[i] += 1;
        left -= 1;
    }
    let mut edges = vec![0.0];
    for s in 0..3 {
        let (lo, hi) = (bounds[s], bounds[s + 1]);
        for j in 1..alloc[s] {
            edges.push(lo + (hi - lo) * j as f64 / alloc[s] as f64);
        }
        edges.push(hi);
    }
    Ok((edges, alloc))
}

/// Bin assignment for every cell of an H×W spectrum.
fn cell_bins(h: usize, w: usize, edges: &[f64], alloc: [usize; 3]) -> Vec<usize> {
    let n_bins = edges.len() - 1;
    let (hh, ww) = ((h * h) as u128, (w * w) as u128);
    let den = hh * ww;
    (0..h * w)
        .map(|i| {
            let kh = signed_bin(i / w, h).unsigned_abs() as u128;
            let kw = signed_bin(i % w, w).unsigned_abs() as u128;
            // r² = num / den, compared exactly against 1/8 and 1/4
            let num = kh * kh * ww + kw * kw * hh;
            if num == 0 {
                return 0;
            }
            let r = ((num as f64) / (den as f64)).sqrt();
            let (first, last) = if alloc == [0; 3] {
                (0, n_bins)
            } else if 8 * num <= den {
                (0, alloc[0])
            } else if 4 * num <= den {
                (alloc[0], alloc[0] + alloc[1])
            } else {
                (alloc[0] + alloc[1], n_bins)
            };
            // first bin in the segment whose upper edge reaches r
            let upper = &edges[first + 1..=last];
            (first + upper.partition_point(|&e| e < r)).min(last - 1)
        })
        .collect()
}

/// Radial PSD over every (b, c) slice of every map.
pub fn radial_psd<T: Scalar>(maps: &[FeatureMap<T>], n_bins: usize) -> Result<RadialPsd, SpectralError> {
    let first = maps.first().ok_or(SpectralError::NoMaps)?;
    let [_, _, h, w] = first.dims();
    for m in maps {
        let [_, _, mh, mw] = m.dims();
        if (mh, mw) != (h, w) {
            return Err(SpectralError::MixedSizes(h, w, mh, mw));
        }
    }
    let (edges, alloc) = bin_edges(n_bins)?;
    let bins = cell_bins(h, w, &edges, alloc);
    let mut counts = vec![0usize; n_bins];
    for &b in &bins {
        counts[b] += 1;
    }

    let fft = Fft2::<T>::new(h, w);
    let hw = (h * w) as f64;
    let slices: Vec<&[T]> = maps.iter().flat_map(|m| m.data().chunks(h * w)).collect();
    let per_slice: Vec<Vec<f64>> = slices
        .par_iter()
        .map(|plane| {
            let mut acc = vec![0.0f64; n_bins];
            for (v, &b) in fft.spectrum(plane).iter().zip(&bins) {
                let (re, im) = (v.re.to_f64_lossless(), v.im.to_f64_lossless());
                acc[b] += (re * re + im * im) / hw;
            }
            acc
        })
        .collect();
    // sequential merge keeps the sum order fixed
    let mut sums = vec![0.0f64; n_bins];
    for acc in &per_slice {
        for (s, a) in sums.iter_mut().zip(acc) {
            *s += a;
        }
    }
    let n_slices = slices.len() as f64;
    let power = sums.iter().zip(&counts).map(|(&s, &c)| if c == 0 { 0.0 } else { s / (c as f64 * n_slices) }).collect();
    let band = (alloc != [0; 3]).then(|| (alloc[0], alloc[0] + alloc[1]));
    Ok(RadialPsd { edges, power, counts, band })
}

/// Σ power × count over the bins tiling `(√2/4, 1/2]`.
pub fn aliasing_energy(psd: &RadialPsd) -> Result<f64, SpectralError> {
    let range = psd.band_bins().ok_or(SpectralError::MisalignedBins)?;
    Ok(range.map(|i| psd.power[i] * psd.counts[i] as f64).sum())
}

/// Σ power × count over all bins: the mean per-slice energy Σx².
pub fn total_energy(psd: &RadialPsd) -> f64 {
    psd.power.iter().zip(&psd.counts).map(|(p, &c)| p * c as f64).sum()
}

/// Result of one aliasing probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub psd: RadialPsd,
    pub aliasing_energy: f64,
    pub total_energy: f64,
}

impl ProbeResult {
    /// Band energy over total energy; zero for an all-zero output.
    pub fn energy_ratio(&self) -> f64 {
        if self.total_energy == 0.0 {
            0.0
        } else {
            self.aliasing_energy / self.total_energy
        }
    }
}

/// Upsample ×2 (sinc), normalize, and measure the aliasing band.
///
/// `params` (and `state`) must fit the upsampled shape. Layers that are not
/// shift-equivariant are rejected.
pub fn aliasing_probe<T: Scalar>(
    cfg: &NormConfig,
    params: &AffineParams<T>,
    mut state: Option<&mut RunningStats<T>>,
    maps: &[FeatureMap<T>],
    n_bins: usize,
) -> Result<ProbeResult, SpectralError> {
    if classify_config(cfg) == EquivarianceClass::Neither {
        return Err(SpectralError::NotShiftEquivariant(cfg.to_string()));
    }
    if maps.is_empty() {
        return Err(SpectralError::NoMaps);
    }
    let mut outs = Vec::with_capacity(maps.len());
    for x in maps {
        outs.push(normalize(&upsample2x_sinc(x), cfg, params, state.as_deref_mut())?);
    }
    let psd = radial_psd(&outs, n_bins)?;
    Ok(ProbeResult { aliasing_energy: aliasing_energy(&psd)?, total_energy: total_energy(&psd), psd })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::{init_params, InitScheme, Preset};
    use crate::synth::{gen_maps, Spectrum};
    use crate::transform::shift2d;

    fn white(dims: crate::tensor::Dims, n: usize, seed: u64) -> Vec<FeatureMap<f64>> {
        gen_maps(dims, n, Spectrum::White, seed).unwrap()
    }

    #[test]
    fn default_edges_split_by_length() {
        let (edges, alloc) = bin_edges(DEFAULT_BINS).unwrap();
        assert_eq!(alloc, [32, 13, 19]);
        assert_eq!(edges.len(), 65);
        assert_eq!(edges[32], BAND_LO);
        assert_eq!(edges[45], BAND_HI);
        assert_eq!(edges[64], R_MAX);
        assert!(edges.windows(2).all(|e| e[0] < e[1]));
    }

    #[test]
    fn three_bins_are_the_segments() {
        let (edges, alloc) = bin_edges(3).unwrap();
        assert_eq!(alloc, [1, 1, 1]);
        assert_eq!(edges, vec![0.0, BAND_LO, BAND_HI, R_MAX]);
    }

    #[test]
    fn too_few_bins() {
        assert_eq!(bin_edges(1), Err(SpectralError::TooFewBins(1)));
        let psd = radial_psd(&white([1, 1, 4, 4], 1, 0), 2).unwrap();
        assert_eq!(aliasing_energy(&psd), Err(SpectralError::MisalignedBins));
    }

    #[test]
    fn constant_map_is_pure_dc() {
        let x = FeatureMap::filled([1, 1, 8, 8], 1.0f64);
        let psd = radial_psd(&[x], DEFAULT_BINS).unwrap();
        assert_eq!(psd.counts[0], 1);
        assert!((psd.power[0] - 64.0).abs() < 1e-12);
        assert!(psd.power[1..].iter().all(|&p| p.abs() < 1e-20));
    }

    #[test]
    fn quarter_frequency_cosine() {
        let w = 16;
        let x = FeatureMap::from_fn([1, 1, 16, w], |[_, _, _, j]| (std::f64::consts::TAU * j as f64 / 4.0).cos());
        let psd = radial_psd(&[x], DEFAULT_BINS).unwrap();
        let hit = psd.edges.windows(2).position(|e| e[0] < 0.25 && 0.25 <= e[1]).unwrap();
        for (i, &p) in psd.power.iter().enumerate() {
            if i != hit {
                assert!(p < 1e-20, "bin {i}: {p}");
            }
        }
        // two cells of |HW/2|²/(HW) each, shared with the bin's other cells
        let expected = 2.0 * 64.0 / psd.counts[hit] as f64;
        assert!((psd.power[hit] - expected).abs() < 1e-10);
    }

    #[test]
    fn white_noise_is_roughly_flat() {
        let psd = radial_psd(&white([4, 4, 32, 32], 4, 1), 16).unwrap();
        let big: Vec<f64> = psd.power.iter().zip(&psd.counts).filter(|(_, &c)| c >= 50).map(|(&p, _)| p).collect();
        let (lo, hi) = big.iter().fold((f64::MAX, 0.0f64), |(a, b), &p| (a.min(p), b.max(p)));
        assert!(hi <= 3.0 * lo, "{lo} .. {hi}");
    }

    #[test]
    fn tone_inside_the_band() {
        // (0.45, 0) lies in the band; 9/20 on a width of 20
        let x = FeatureMap::from_fn([1, 1, 20, 20], |[_, _, _, j]| (std::f64::consts::TAU * 0.45 * j as f64).cos());
        let psd = radial_psd(std::slice::from_ref(&x), DEFAULT_BINS).unwrap();
        let e = aliasing_energy(&psd).unwrap();
        assert!((e - total_energy(&psd)).abs() < 1e-9);
        assert!((e - x.data().iter().map(|v| v * v).sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn zero_maps_have_zero_energy() {
        let psd = radial_psd(&[FeatureMap::<f64>::zeros([1, 2, 8, 8])], DEFAULT_BINS).unwrap();
        assert_eq!(aliasing_energy(&psd).unwrap(), 0.0);
    }

    #[test]
    fn upsampled_maps_leave_band_empty() {
        for dims in [[1, 2, 8, 8], [1, 1, 7, 10]] {
            let up: Vec<_> = white(dims, 2, 2).iter().map(upsample2x_sinc).collect();
            let psd = radial_psd(&up, DEFAULT_BINS).unwrap();
            assert!(aliasing_energy(&psd).unwrap() <= 1e-18);
        }
    }

    #[test]
    fn parseval() {
        let maps = white([2, 3, 12, 10], 2, 3);
        let psd = radial_psd(&maps, DEFAULT_BINS).unwrap();
        let slices = (maps.len() * 6) as f64;
        let energy: f64 = maps.iter().flat_map(|m| m.data()).map(|v| v * v).sum::<f64>() / slices;
        assert!((total_energy(&psd) - energy).abs() <= 1e-10 * energy);
    }

    #[test]
    fn psd_ignores_shifts() {
        let maps = white([1, 2, 8, 12], 1, 4);
        let a = radial_psd(&maps, 20).unwrap();
        let b = radial_psd(&[shift2d(&maps[0], 3, -5)], 20).unwrap();
        for (p, q) in a.power.iter().zip(&b.power) {
            assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
        }
    }

    #[test]
    fn mixed_sizes_rejected() {
        let maps = vec![FeatureMap::<f64>::zeros([1, 1, 4, 4]), FeatureMap::zeros([1, 1, 4, 6])];
        assert_eq!(radial_psd(&maps, 8), Err(SpectralError::MixedSizes(4, 4, 4, 6)));
    }

    fn probe(p: Preset, maps: &[FeatureMap<f64>]) -> ProbeResult {
        let cfg = p.config();
        let [b, c, h, w] = maps[0].dims();
        let params = init_params(&cfg, [b, c, 2 * h, 2 * w], InitScheme::Gaussian, 7);
        let mut st = cfg.track_running_stats.then(|| RunningStats::new(c));
        aliasing_probe(&cfg, &params, st.as_mut(), maps, DEFAULT_BINS).unwrap()
    }

    #[test]
    fn probe_separates_layers() {
        let maps = white([2, 4, 8, 8], 2, 5);
        for p in [Preset::BatchNorm, Preset::InstanceNorm, Preset::LayerNormAf] {
            assert!(probe(p, &maps).energy_ratio() <= 1e-10, "{p}");
        }
        assert!(probe(Preset::LayerNormC, &maps).energy_ratio() >= 1e-6);
        let id = aliasing_probe(&NormConfig::identity(), &AffineParams::none(), None, &maps, DEFAULT_BINS).unwrap();
        assert!(id.aliasing_energy <= 1e-18);
    }

    #[test]
    fn probe_rejects_non_shift_equivariant() {
        let cfg = Preset::LayerNormChw.config();
        let params = init_params::<f64>(&cfg, [1, 2, 8, 8], InitScheme::Default, 0);
        let maps = white([1, 2, 4, 4], 1, 0);
        assert!(matches!(
            aliasing_probe(&cfg, &params, None, &maps, DEFAULT_BINS),
            Err(SpectralError::NotShiftEquivariant(_))
        ));
    }
}
