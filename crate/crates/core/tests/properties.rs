mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use svyfosr::data::{equispaced_grid, format_float};
use svyfosr::evaluation::{ise, variance_proportion};
use svyfosr::glm::gaussian_wls;
use svyfosr::inference::{fit_svy_fosr, max_abs_quantile, normal_quantile, FitOptions};
use svyfosr::resampling::{resample_survey_weighted, resample_unweighted, BootScheme};
use svyfosr::simulation::{inclusion_probabilities, standardize};
use svyfosr::smoothing::{SmootherBasis, SmootherSpec};
use svyfosr::GlmFamily;

fn correlation_from_factors(l: usize, loadings: &[f64]) -> DMatrix<f64> {
    let k = loadings.len() / l;
    let a = DMatrix::from_fn(l, k, |i, j| loadings[i * k + j]);
    let cov = &a * a.transpose() + DMatrix::identity(l, l) * 0.05;
    let d: Vec<f64> = (0..l).map(|i| cov[(i, i)].sqrt()).collect();
    DMatrix::from_fn(l, l, |i, j| cov[(i, j)] / (d[i] * d[j]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn wls_invariant_to_weight_scale(seed in 0u64..1000, c in 0.01f64..100.0) {
        let f = fixture(seed, 40, 3, 8, GlmFamily::Gaussian);
        let a = gaussian_wls(&f.x, &f.y, &f.w, &f.names).unwrap();
        let scaled: Vec<f64> = f.w.iter().map(|v| v * c).collect();
        let b = gaussian_wls(&f.x, &f.y, &scaled, &f.names).unwrap();
        prop_assert!(relative_error(&b.beta, &a.beta) < 1e-10);
    }

    #[test]
    fn wls_equivariant_to_linear_shift(seed in 0u64..1000, shift in proptest::collection::vec(-5.0f64..5.0, 3)) {
        let f = fixture(seed, 40, 3, 8, GlmFamily::Gaussian);
        let a = gaussian_wls(&f.x, &f.y, &f.w, &f.names).unwrap();
        let offset = &f.x * DMatrix::from_column_slice(3, 1, &shift);
        let y2 = DMatrix::from_fn(40, 8, |i, s| f.y[(i, s)] + offset[(i, 0)]);
        let b = gaussian_wls(&f.x, &y2, &f.w, &f.names).unwrap();
        for j in 0..3 {
            for s in 0..8 {
                prop_assert!((b.beta[(j, s)] - a.beta[(j, s)] - shift[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cma_quantile_between_single_and_independent(
        l in 2usize..12,
        loadings in proptest::collection::vec(-1.0f64..1.0, 36),
        seed in 0u64..1000,
    ) {
        let corr = correlation_from_factors(l, &loadings[..l * 3]);
        let q = max_abs_quantile(&corr, 0.05, 20_000, seed).unwrap();
        let q_ind = max_abs_quantile(&DMatrix::identity(l, l), 0.05, 20_000, seed).unwrap();
        prop_assert!(q >= normal_quantile(0.975) - 1e-12);
        prop_assert!(q <= q_ind + 0.03, "q {} above independent {}", q, q_ind);
    }

    #[test]
    fn cma_quantile_decreases_with_common_correlation(l in 3usize..15, seed in 0u64..1000) {
        let exch = |rho: f64| DMatrix::from_fn(l, l, |i, j| if i == j { 1.0 } else { rho });
        let q1 = max_abs_quantile(&exch(0.2), 0.05, 20_000, seed).unwrap();
        let q2 = max_abs_quantile(&exch(0.8), 0.05, 20_000, seed).unwrap();
        prop_assert!(q2 <= q1 + 0.02, "q(0.8) = {} > q(0.2) = {}", q2, q1);
    }

    #[test]
    fn ise_reverse_grid_and_symmetry(v in proptest::collection::vec(-3.0f64..3.0, 2..40)) {
        let grid = equispaced_grid(v.len());
        let zero = vec![0.0; v.len()];
        let a = ise(&v, &zero, &grid).unwrap();
        let b = ise(&zero, &v, &grid).unwrap();
        let rv: Vec<f64> = v.iter().rev().cloned().collect();
        let rg: Vec<f64> = grid.iter().map(|s| 1.0 - s).rev().collect();
        let c = ise(&rv, &zero, &rg).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((a - c).abs() < 1e-10);
    }

    #[test]
    fn variance_proportion_invariant_to_shift_and_scale(seed in 0u64..1000, shift in -10.0f64..10.0, scale in 0.1f64..10.0) {
        let (strata, psus) = design_labels(3, 2, 6);
        let n = strata.len();
        let f = fixture(seed, n, 2, 5, GlmFamily::Gaussian);
        let y2 = f.y.map(|v| scale * v + shift);
        let a = variance_proportion(&dataset(f.y, f.x.clone(), f.names.clone(), f.w.clone(), strata.clone(), psus.clone())).unwrap();
        let b = variance_proportion(&dataset(y2, f.x, f.names, f.w, strata, psus)).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn smoother_preserves_lines(a in -5.0f64..5.0, b in -5.0f64..5.0, log_lambda in -4.0f64..8.0) {
        let grid = equispaced_grid(30);
        let sb = SmootherBasis::new(&grid, SmootherSpec::default()).unwrap();
        let y: Vec<f64> = grid.iter().map(|s| a + b * s).collect();
        let out = sb.apply(&y, 10f64.powf(log_lambda));
        for (o, t) in out.iter().zip(&y) {
            prop_assert!((o - t).abs() < 1e-8);
        }
    }

    #[test]
    fn inclusion_probabilities_sum_and_order(scores in proptest::collection::vec(0.01f64..10.0, 5..60), frac in 0.05f64..0.9) {
        let n = frac * scores.len() as f64;
        let (pi, _) = inclusion_probabilities(&scores, n);
        prop_assert!((pi.iter().sum::<f64>() - n).abs() < 1e-8);
        prop_assert!(pi.iter().all(|&p| p > 0.0 && p <= 1.0));
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] < scores[j] {
                    prop_assert!(pi[i] <= pi[j] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn standardize_has_zero_mean_unit_sd(v in proptest::collection::vec(-100.0f64..100.0, 3..50)) {
        prop_assume!(sample_var(&v) > 1e-6);
        let z = standardize(&v);
        prop_assert!(mean(&z).abs() < 1e-9);
        let sd = (z.iter().map(|x| x * x).sum::<f64>() / z.len() as f64).sqrt();
        prop_assert!((sd - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bootstrap_multiplicities_sum_to_n(n in 1usize..200, seed in 0u64..1000) {
        let set = resample_unweighted(n, 5, seed);
        for b in 0..5 {
            let w = set.fit_weights(b, &vec![1.0; n]);
            prop_assert!((w.iter().sum::<f64>() - n as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn weighted_bootstrap_is_multiplicity_times_weight(w in proptest::collection::vec(0.1f64..20.0, 2..50), seed in 0u64..1000) {
        let set = resample_survey_weighted(&w, 4, seed).unwrap();
        let counts = resample_unweighted(w.len(), 4, seed);
        for b in 0..4 {
            let fw = set.fit_weights(b, &w);
            let m = counts.fit_weights(b, &vec![1.0; w.len()]);
            for i in 0..w.len() {
                let k = fw[i] / w[i];
                prop_assert!((k - k.round()).abs() < 1e-9);
            }
            prop_assert!((m.iter().sum::<f64>() - w.len() as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn format_float_round_trips(v in proptest::num::f64::NORMAL | proptest::num::f64::ZERO) {
        let back: f64 = format_float(v).parse().unwrap();
        prop_assert_eq!(back, v);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn cma_band_contains_pointwise_band(seed in 0u64..1000, scheme in 0usize..2) {
        let (strata, psus) = design_labels(4, 2, 8);
        let n = strata.len();
        let f = fixture(seed, n, 2, 20, GlmFamily::Gaussian);
        let ds = dataset(f.y, f.x, f.names, f.w, strata, psus);
        let opts = FitOptions {
            scheme: [BootScheme::Weighted, BootScheme::Brr][scheme],
            n_replicates: 30,
            mc_samples: 2000,
            seed,
            ..Default::default()
        };
        let fit = fit_svy_fosr(&ds, &opts, None).unwrap();
        let b = &fit.bands;
        for j in 0..b.n_coefficients() {
            prop_assert!(b.q[j] >= b.z);
            for s in 0..b.n_grid() {
                prop_assert!(b.cma_lo[(j, s)] <= b.pointwise_lo[(j, s)] + 1e-12);
                prop_assert!(b.cma_hi[(j, s)] >= b.pointwise_hi[(j, s)] - 1e-12);
                prop_assert!(b.se[(j, s)] >= 0.0);
                prop_assert!(b.pointwise_lo[(j, s)] <= b.beta_hat[(j, s)]);
            }
        }
    }
}
