mod common;

use intercity::data::{load_persons, Attributes};
use intercity::spec::Purpose;
use intercity::synth::reference_tripgen_truth;
use intercity::tripgen::{
    fit_from_coefficients, fit_linear, fit_negbin, fit_negbin_with, fit_poisson, load_tripgen_records, predict_trips,
    InterceptMode, NegBinOptions, RegressionFit, RegressionModel, TripGenRecord,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};

const TABLE5: [(&str, f64); 7] = [
    ("working", 0.2197),
    ("univ_degree", 0.1933),
    ("married", 0.1029),
    ("male", -0.1566),
    ("age", 0.0063),
    ("income", 0.0207),
    ("accessibility", 0.0829),
];

fn attrs(pairs: &[(&str, f64)]) -> Attributes {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn record(i: usize, y: u32, covariates: Attributes) -> TripGenRecord {
    TripGenRecord {
        person_id: format!("P{i:05}"),
        purpose: Purpose::Business,
        annual_trip_count: y,
        covariates,
    }
}

fn within(fit: &RegressionFit, name: &str, truth: f64, k: f64) {
    let c = fit.coefficients.iter().find(|c| c.name == name).unwrap();
    let se = c.std_error.unwrap();
    assert!((c.estimate - truth).abs() <= k * se, "{name}: {} vs {truth} (se {se})", c.estimate);
}

fn residuals(fit: &RegressionFit, records: &[TripGenRecord]) -> Vec<f64> {
    records.iter().map(|r| f64::from(r.annual_trip_count) - fit.linear_predictor(&r.covariates).unwrap()).collect()
}

#[test]
fn exact_line_is_recovered() {
    let records: Vec<_> = (0..10).map(|i| record(i, 2 + 3 * i as u32, attrs(&[("x", i as f64)]))).collect();
    let fit = fit_linear(&records, &["x"], InterceptMode::Free).unwrap();
    assert!((fit.coefficient("(Intercept)").unwrap() - 2.0).abs() < 1e-10);
    assert!((fit.coefficient("x").unwrap() - 3.0).abs() < 1e-10);
    assert!((fit.r2.unwrap() - 1.0).abs() < 1e-12);
}

fn survey_like_records(n: usize, seed: u64) -> Vec<TripGenRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.71).unwrap();
    (0..n)
        .map(|i| {
            let bit = |rng: &mut ChaCha8Rng, p: f64| f64::from(u8::from(rng.gen::<f64>() < p));
            let cov = attrs(&[
                ("working", bit(&mut rng, 0.7)),
                ("univ_degree", bit(&mut rng, 0.5)),
                ("married", bit(&mut rng, 0.6)),
                ("male", bit(&mut rng, 0.5)),
                ("age", rng.gen_range(18.0..70.0)),
                ("income", rng.gen_range(1.0..30.0)),
                ("accessibility", rng.gen_range(2.0..9.0)),
            ]);
            let eta: f64 = TABLE5.iter().map(|(k, b)| b * cov[*k]).sum();
            let y = (eta + noise.sample(&mut rng)).round().max(0.0) as u32;
            record(i, y, cov)
        })
        .collect()
}

#[test]
fn linear_recovery_from_survey_sized_sample() {
    let records = survey_like_records(524, 77);
    let names: Vec<&str> = TABLE5.iter().map(|(k, _)| *k).collect();
    let fit = fit_linear(&records, &names, InterceptMode::FixedZero).unwrap();
    assert_eq!(fit.coefficient("(Intercept)"), None);
    for (k, b) in TABLE5 {
        within(&fit, k, b, 3.0);
    }
    assert!(fit.adj_r2.unwrap() <= fit.r2.unwrap());
    assert!((fit.sigma.unwrap() - 0.71).abs() < 0.15);
}

#[test]
fn linear_fit_statistics_reproduce() {
    let records = survey_like_records(300, 5);
    let names: Vec<&str> = TABLE5.iter().map(|(k, _)| *k).collect();
    for mode in [InterceptMode::Free, InterceptMode::FixedZero] {
        let fit = fit_linear(&records, &names, mode).unwrap();
        let e = residuals(&fit, &records);
        let n = records.len() as f64;
        for x in names.iter() {
            let dot: f64 = records.iter().zip(&e).map(|(r, e)| r.covariates[*x] * e).sum();
            assert!(dot.abs() < 1e-8 * n, "{x}: {dot}");
        }
        // Predictions plus residuals are the original counts, so a refit lands on the same point.
        let rebuilt: Vec<TripGenRecord> = records
            .iter()
            .zip(&e)
            .map(|(r, e)| {
                let y = fit.linear_predictor(&r.covariates).unwrap() + e;
                TripGenRecord {
                    annual_trip_count: y.round() as u32,
                    ..r.clone()
                }
            })
            .collect();
        let again = fit_linear(&rebuilt, &names, mode).unwrap();
        for (a, b) in fit.coefficients.iter().zip(&again.coefficients) {
            assert!((a.estimate - b.estimate).abs() < 1e-10, "{}", a.name);
        }
        let ssr: f64 = e.iter().map(|v| v * v).sum();
        let ybar = if mode == InterceptMode::Free {
            records.iter().map(|r| f64::from(r.annual_trip_count)).sum::<f64>() / n
        } else {
            0.0
        };
        let sst: f64 = records.iter().map(|r| (f64::from(r.annual_trip_count) - ybar).powi(2)).sum();
        assert!((fit.r2.unwrap() - (1.0 - ssr / sst)).abs() < 1e-10, "{mode:?}");
    }
}

#[test]
fn collinear_columns_are_named() {
    let records: Vec<_> = (0..20).map(|i| record(i, i as u32, attrs(&[("a", i as f64), ("b", 2.0 * i as f64)]))).collect();
    let err = fit_linear(&records, &["a", "b"], InterceptMode::Free).unwrap_err();
    assert!(err.to_string().contains('b'), "{err}");
}

fn negbin_records(n: usize, b0: f64, b1: f64, theta: Option<f64>, seed: u64) -> Vec<TripGenRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let x: f64 = rng.gen_range(0.0..4.0);
            let m = (b0 + b1 * x).exp();
            let rate = match theta {
                Some(t) => Gamma::new(t, m / t).unwrap().sample(&mut rng),
                None => m,
            };
            let y = if rate > 0.0 { Poisson::new(rate).unwrap().sample(&mut rng) as u32 } else { 0 };
            record(i, y, attrs(&[("x", x)]))
        })
        .collect()
}

#[test]
fn negbin_recovers_simulated_parameters() {
    let records = negbin_records(2000, -2.0, 0.5, Some(1.5), 12);
    let fit = fit_negbin(&records, &["x"]).unwrap();
    assert!(fit.converged);
    within(&fit, "(Intercept)", -2.0, 3.0);
    within(&fit, "x", 0.5, 3.0);
    let (t, se) = (fit.theta.unwrap(), fit.theta_std_error.unwrap());
    assert!((t - 1.5).abs() <= 3.0 * se, "theta {t} ± {se}");
    assert!(fit.residual_deviance.unwrap() <= fit.null_deviance.unwrap());
}

#[test]
fn huge_fixed_theta_is_the_poisson_fit() {
    let records = negbin_records(1500, -0.5, 0.4, None, 3);
    let pois = fit_poisson(&records, &["x"]).unwrap();
    let opts = NegBinOptions {
        fixed_theta: Some(1e6),
        ..Default::default()
    };
    let nb = fit_negbin_with(&records, &["x"], &opts).unwrap();
    assert!(nb.theta_fixed);
    for (a, b) in pois.coefficients.iter().zip(&nb.coefficients) {
        assert!((a.estimate - b.estimate).abs() < 1e-3, "{}", a.name);
    }
}

#[test]
fn free_theta_never_does_worse_than_poisson() {
    for (seed, theta) in [(1, Some(0.7)), (2, Some(5.0)), (4, None)] {
        let records = negbin_records(800, -1.0, 0.6, theta, seed);
        let nb = fit_negbin(&records, &["x"]).unwrap();
        let pois = fit_poisson(&records, &["x"]).unwrap();
        assert!(nb.two_loglik.unwrap() >= pois.two_loglik.unwrap() - 1e-6, "seed {seed}");
    }
}

#[test]
fn all_zero_counts_are_rejected() {
    let records: Vec<_> = (0..30).map(|i| record(i, 0, attrs(&[("x", i as f64)]))).collect();
    assert!(fit_negbin(&records, &["x"]).is_err());
}

#[test]
fn published_coefficient_predictions() {
    let nb = fit_from_coefficients(RegressionModel::NegativeBinomial, &[("(Intercept)", -11.028), ("accessibility", 1.6662)]);
    let p = predict_trips(&nb, &attrs(&[("accessibility", 7.0)])).unwrap();
    assert!((p.trips - 0.6354f64.exp()).abs() < 1e-12);
    assert!((p.trips - 1.888).abs() < 5e-4, "{}", p.trips);

    let lin = fit_from_coefficients(RegressionModel::Linear { intercept: InterceptMode::FixedZero }, &TABLE5);
    let person = attrs(&[
        ("working", 1.0),
        ("univ_degree", 1.0),
        ("married", 1.0),
        ("male", 1.0),
        ("age", 30.0),
        ("income", 5.0),
        ("accessibility", 7.0),
    ]);
    let p = predict_trips(&lin, &person).unwrap();
    assert!((p.trips - 1.2321).abs() < 1e-12, "{}", p.trips);
    assert!(!p.floored);

    let zero: Attributes = TABLE5.iter().map(|(k, _)| (k.to_string(), 0.0)).collect();
    assert_eq!(predict_trips(&lin, &zero).unwrap().trips, 0.0);
    let count = fit_from_coefficients(RegressionModel::Poisson, &[("accessibility", 1.0)]);
    assert_eq!(predict_trips(&count, &attrs(&[("accessibility", 0.0)])).unwrap().trips, 1.0);

    let negative = fit_from_coefficients(RegressionModel::Linear { intercept: InterceptMode::FixedZero }, &[("x", -1.0)]);
    let p = predict_trips(&negative, &attrs(&[("x", 2.0)])).unwrap();
    assert_eq!(p.trips, 0.0);
    assert!(p.floored);
    assert!(predict_trips(&negative, &Attributes::new()).is_err());
}

proptest! {
    #[test]
    fn count_predictions_rise_with_accessibility(a in -5.0f64..15.0, step in 0.01f64..3.0) {
        let nb = fit_from_coefficients(RegressionModel::NegativeBinomial, &[("(Intercept)", -11.028), ("accessibility", 1.6662)]);
        let lo = predict_trips(&nb, &attrs(&[("accessibility", a)])).unwrap().trips;
        let hi = predict_trips(&nb, &attrs(&[("accessibility", a + step)])).unwrap().trips;
        prop_assert!(lo > 0.0 && hi > lo);
    }

    #[test]
    fn linear_residuals_are_orthogonal(seed in any::<u64>(), n in 20usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records: Vec<_> = (0..n)
            .map(|i| {
                let (a, b): (f64, f64) = (rng.gen_range(-3.0..3.0), rng.gen_range(0.0..10.0));
                record(i, rng.gen_range(0..40), attrs(&[("a", a), ("b", b)]))
            })
            .collect();
        let fit = fit_linear(&records, &["a", "b"], InterceptMode::Free).unwrap();
        let e = residuals(&fit, &records);
        prop_assert!(e.iter().sum::<f64>().abs() < 1e-8 * n as f64);
        for x in ["a", "b"] {
            let dot: f64 = records.iter().zip(&e).map(|(r, e)| r.covariates[x] * e).sum();
            prop_assert!(dot.abs() < 1e-8 * n as f64);
        }
    }
}

#[test]
fn fixture_fits_recover_their_truth() {
    let persons = load_persons(&common::fixture("persons.csv")).unwrap();
    let records = load_tripgen_records(&common::fixture("tripgen.csv"), &persons).unwrap();
    let truth = reference_tripgen_truth();
    let of = |p: Purpose| records.iter().filter(|r| r.purpose == p).cloned().collect::<Vec<_>>();

    let business = of(Purpose::Business);
    assert_eq!(business.len(), 608);
    let t = &truth[&Purpose::Business];
    let names: Vec<&str> = t.covariate_names().collect();
    let fit = fit_negbin(&business, &names).unwrap();
    for c in &t.coefficients {
        within(&fit, &c.name, c.estimate, 3.0);
    }
    assert!((fit.theta.unwrap() - t.theta.unwrap()).abs() <= 3.0 * fit.theta_std_error.unwrap());

    let leisure = of(Purpose::NonBusiness);
    let t = &truth[&Purpose::NonBusiness];
    let names: Vec<&str> = t.covariate_names().collect();
    let fit = fit_linear(&leisure, &names, InterceptMode::FixedZero).unwrap();
    for c in &t.coefficients {
        within(&fit, &c.name, c.estimate, 3.0);
    }
}
