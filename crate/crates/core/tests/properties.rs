use proptest::prelude::*;

use equinorm::io::{decode_tensor, encode_tensor, Precision};
use equinorm::metrics::{cosine_distance, Moments};
use equinorm::norm::{init_params, normalize, InitScheme, Mode, NormConfig, Preset, RunningStats};
use equinorm::spectral::{radial_psd, total_energy};
use equinorm::transform::{shift2d, translate1d, translate2d, Signal1d};
use equinorm::verify::{classify_config, translate_naive, unitarity_check, EquivarianceClass};
use equinorm::{AxisSet, Dims, FeatureMap};

fn dims() -> impl Strategy<Value = Dims> {
    (1usize..3, 1usize..4, 1usize..7, 1usize..7).prop_map(|(b, c, h, w)| [b, c, h, w])
}

fn map_with(dims: Dims) -> impl Strategy<Value = FeatureMap<f64>> {
    let n: usize = dims.iter().product();
    prop::collection::vec(-10.0f64..10.0, n).prop_map(move |v| FeatureMap::new(dims, v).unwrap())
}

fn map() -> impl Strategy<Value = FeatureMap<f64>> {
    dims().prop_flat_map(map_with)
}

fn axis_set() -> impl Strategy<Value = AxisSet> {
    (0u8..16).prop_map(AxisSet::from_bits)
}

fn signal() -> impl Strategy<Value = Signal1d<f64>> {
    (1usize..20, 1usize..4)
        .prop_flat_map(|(k, d)| prop::collection::vec(-1.0f64..1.0, k * d).prop_map(move |v| Signal1d::new(k, d, v)))
}

fn close(a: &FeatureMap<f64>, b: &FeatureMap<f64>, tol: f64) -> bool {
    a.max_abs_diff(b).unwrap() <= tol * (1.0 + a.max_abs().max(b.max_abs()))
}

proptest! {
    #[test]
    fn shift_composes_and_inverts(x in map(), a in -20i64..20, b in -20i64..20, c in -20i64..20, d in -20i64..20) {
        prop_assert_eq!(shift2d(&shift2d(&x, a, b), c, d), shift2d(&x, a + c, b + d));
        prop_assert_eq!(shift2d(&shift2d(&x, a, b), -a, -b), x);
    }

    #[test]
    fn translation_is_linear(x in map(), s in -3.0f64..3.0, dh in -5.0f64..5.0, dw in -5.0f64..5.0) {
        let y = x.map(|v| v * 0.5 - 1.0);
        let lhs = translate2d(&x.zip_map(&y, |a, b| s * a + b).unwrap(), dh, dw);
        let rhs = translate2d(&x, dh, dw).zip_map(&translate2d(&y, dh, dw), |a, b| s * a + b).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-12));
    }

    #[test]
    fn translation_matches_shift_on_integers(x in map(), dh in -9i64..9, dw in -9i64..9) {
        prop_assert!(close(&translate2d(&x, dh as f64, dw as f64), &shift2d(&x, dh, dw), 1e-12));
    }

    #[test]
    fn fft_and_convolution_translate_alike(v in signal(), g in -30.0f64..30.0) {
        prop_assert!(translate1d(&v, g).max_abs_diff(&translate_naive(&v, g)) <= 1e-12);
    }

    #[test]
    fn nyquist_free_translation_preserves_energy(v in signal(), g in -30.0f64..30.0) {
        prop_assert!(unitarity_check(&v.without_nyquist(), g) <= 1e-11);
    }

    #[test]
    fn normalization_ignores_positive_scale(
        x in map(), center in axis_set(), scale in axis_set(), a in 0.1f64..10.0
    ) {
        prop_assume!(!scale.is_empty());
        let cfg = NormConfig::new(center, scale, Some(AxisSet::C));
        let p = init_params(&cfg, x.dims(), InitScheme::Gaussian, 1);
        let (Ok(fx), Ok(fax)) = (normalize(&x, &cfg, &p, None), normalize(&x.scale(a), &cfg, &p, None)) else {
            return Ok(()); // zero variance somewhere: nothing to compare
        };
        prop_assert!(close(&fx, &fax, 1e-9));
    }

    #[test]
    fn eval_batchnorm_is_affine(x in map(), t in 0.0f64..1.0) {
        let cfg = Preset::BatchNorm.config().with_mode(Mode::Evaluation);
        let p = init_params(&cfg, x.dims(), InitScheme::Gaussian, 2);
        let mut st = RunningStats::new(x.dims()[1]);
        st.mean.iter_mut().enumerate().for_each(|(i, m)| *m = i as f64 * 0.3);
        st.var.iter_mut().enumerate().for_each(|(i, v)| *v = 1.0 + i as f64);
        let y = x.map(|v| 2.0 - v * v / 10.0);
        let f = |z: &FeatureMap<f64>| normalize(z, &cfg, &p, Some(&mut st.clone())).unwrap();
        let mixed = f(&x.zip_map(&y, |a, b| t * a + (1.0 - t) * b).unwrap());
        let combo = f(&x).zip_map(&f(&y), |a, b| t * a + (1.0 - t) * b).unwrap();
        prop_assert!(close(&mixed, &combo, 1e-12));
    }

    #[test]
    fn shift_equivariant_classes_commute_with_shifts(
        x in map(), center in axis_set(), scale in axis_set(), affine in prop::option::of(axis_set()),
        dh in -6i64..6, dw in -6i64..6
    ) {
        let cfg = NormConfig::new(center, scale, affine).with_epsilon(1e-5);
        prop_assume!(classify_config(&cfg) != EquivarianceClass::Neither);
        let p = init_params(&cfg, x.dims(), InitScheme::Gaussian, 3);
        let lhs = normalize(&shift2d(&x, dh, dw), &cfg, &p, None).unwrap();
        let rhs = shift2d(&normalize(&x, &cfg, &p, None).unwrap(), dh, dw);
        prop_assert!(close(&lhs, &rhs, 1e-10));
    }

    #[test]
    fn class_ignores_centering(c1 in axis_set(), c2 in axis_set(), scale in axis_set(), affine in prop::option::of(axis_set())) {
        prop_assert_eq!(
            classify_config(&NormConfig::new(c1, scale, affine)),
            classify_config(&NormConfig::new(c2, scale, affine))
        );
    }

    #[test]
    fn cosine_distance_bounds(x in map()) {
        let y = x.map(|v| v.sin() + 0.1);
        if let (Ok(a), Ok(b)) = (cosine_distance(&x, &y), cosine_distance(&y, &x)) {
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&a));
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn psd_parseval_and_shift_invariance(x in map(), dh in -5i64..5, dw in -5i64..5) {
        let psd = radial_psd(std::slice::from_ref(&x), 16).unwrap();
        let [b, c, _, _] = x.dims();
        let energy = x.data().iter().map(|v| v * v).sum::<f64>() / (b * c) as f64;
        prop_assert!((total_energy(&psd) - energy).abs() <= 1e-10 * energy.max(1e-300));
        let shifted = radial_psd(&[shift2d(&x, dh, dw)], 16).unwrap();
        for (p, q) in psd.power.iter().zip(&shifted.power) {
            prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
        }
    }

    #[test]
    fn moments_merge_in_any_split(v in prop::collection::vec(-1e3f64..1e3, 2..60), cut in 0usize..60) {
        let cut = cut.min(v.len());
        let all: Moments = v.iter().copied().collect();
        let merged = v[..cut].iter().copied().collect::<Moments>().merge(v[cut..].iter().copied().collect());
        prop_assert_eq!(merged.n, all.n);
        prop_assert!((merged.mean - all.mean).abs() <= 1e-9);
        prop_assert!((merged.stderr() - all.stderr()).abs() <= 1e-9 * (1.0 + all.stderr()));
    }

    #[test]
    fn tensor_bytes_round_trip(x in map()) {
        let back = decode_tensor(&encode_tensor(&x, Precision::F64), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, x);
    }
}
