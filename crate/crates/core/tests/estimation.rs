mod common;

use intercity::data::{Attributes, ChoiceDataset, ChoiceObservation, DestinationNest, ModeAlternative};
use intercity::estimation::{
    estimate, fit_stats, gradient, loglik_joint, loglik_rp, loglik_sp, null_loglik, EstimationControls, Problem, Reduction,
};
use intercity::spec::{
    pack_parameters, AppliesTo, AttributeSource, LambdaTerm, Mode, ModelSpec, ModelSpecBuilder, NamedParams, ParameterVector,
    Purpose, Scope, TermScope, UtilityTerm,
};
use intercity::synth::{
    design_scenario, recovery_test, reference_truth, simulate_choices, simulate_population, Marginals, RecoveryTolerances,
    TripsPerPerson,
};
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

fn attrs(pairs: &[(&str, f64)]) -> Attributes {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn observation(id: &str, scope: Scope, purpose: Purpose, nests: &[&[(Mode, f64)]], chosen: (usize, usize)) -> ChoiceObservation {
    ChoiceObservation {
        id: id.into(),
        person_id: id.into(),
        scope,
        purpose,
        covariates: attrs(&[("constant", 1.0)]),
        rp_chosen_mode: None,
        nests: nests
            .iter()
            .enumerate()
            .map(|(d, alts)| DestinationNest {
                region: d as u32 + 1,
                distance_km: 500.0,
                attributes: Attributes::new(),
                alternatives: alts
                    .iter()
                    .map(|(m, x)| ModeAlternative {
                        mode: *m,
                        attributes: attrs(&[("x", *x)]),
                    })
                    .collect(),
            })
            .collect(),
        chosen_nest: chosen.0,
        chosen_alt: chosen.1,
    }
}

fn dataset(scope: Scope, purpose: Purpose, obs: Vec<ChoiceObservation>) -> ChoiceDataset {
    let mut d = ChoiceDataset::empty(scope, purpose);
    d.observations = obs;
    d
}

fn term(coefficient: &str, source: AttributeSource, applies_to: AppliesTo, scope: TermScope) -> UtilityTerm {
    UtilityTerm {
        coefficient: coefficient.into(),
        source,
        applies_to,
        scope,
    }
}

/// Business shape reduced to one generic attribute: RP nested with a constant link, SP mode-only.
fn tiny_business() -> ModelSpec {
    let mut b = ModelSpecBuilder::new(Purpose::Business);
    b.mode_terms = vec![term("b_x", AttributeSource::Alternative("x".into()), AppliesTo::All, TermScope::All)];
    b.lambda_terms = vec![LambdaTerm {
        coefficient: "w_const".into(),
        factors: vec![],
        scope: TermScope::Rp,
    }];
    b.scale = Some("log_mu".into());
    b.build().unwrap()
}

fn params(spec: &ModelSpec, values: &[(&str, f64)]) -> ParameterVector {
    let mut named: NamedParams = spec.layout().names().map(|n| (n.to_string(), 0.0)).collect();
    for (k, v) in values {
        named.insert(k.to_string(), *v);
    }
    pack_parameters(spec, &named).unwrap()
}

fn rp_instance() -> ChoiceDataset {
    // d1 = {1, 0}, d2 = {0.5}; chosen (d1, m1).
    dataset(
        Scope::Rp,
        Purpose::Business,
        vec![observation(
            "rp",
            Scope::Rp,
            Purpose::Business,
            &[&[(Mode::Bus, 1.0), (Mode::Car, 0.0)], &[(Mode::Bus, 0.5)]],
            (0, 0),
        )],
    )
}

fn sp_instance() -> ChoiceDataset {
    dataset(
        Scope::Sp,
        Purpose::Business,
        vec![observation(
            "sp",
            Scope::Sp,
            Purpose::Business,
            &[&[(Mode::Airline, 1.0), (Mode::Lcc, 0.0), (Mode::Hsr, 0.0)]],
            (0, 0),
        )],
    )
}

#[test]
fn loglik_examples() {
    let spec = tiny_business();
    let p = params(&spec, &[("b_x", 1.0)]);
    let empty_rp = ChoiceDataset::empty(Scope::Rp, Purpose::Business);
    let empty_sp = ChoiceDataset::empty(Scope::Sp, Purpose::Business);
    assert_eq!(loglik_rp(&empty_rp, &p, &spec).unwrap(), 0.0);
    assert_eq!(loglik_sp(&empty_sp, &p, &spec).unwrap(), 0.0);

    let even = dataset(
        Scope::Sp,
        Purpose::Business,
        vec![observation("e", Scope::Sp, Purpose::Business, &[&[(Mode::Airline, 0.3), (Mode::Lcc, 0.3)]], (0, 1))],
    );
    assert!((loglik_sp(&even, &p, &spec).unwrap() - 0.5f64.ln()).abs() < 1e-15);
    assert!((loglik_sp(&even, &p, &spec).unwrap() + 0.693147).abs() < 1e-6);

    // Oracle: P(d1) from W_d = λΓ_d with λ = 0.5, times P(m1 | d1).
    let g1 = (2f64.exp() + 1.0).ln();
    let g2 = 1.0f64;
    let pd1 = (0.5 * g1).exp() / ((0.5 * g1).exp() + (0.5 * g2).exp());
    let pm1 = 2f64.exp() / (2f64.exp() + 1.0);
    let rp = loglik_rp(&rp_instance(), &p, &spec).unwrap();
    assert!((rp - (pd1 * pm1).ln()).abs() < 1e-13);
    assert!((rp + 0.57752).abs() < 5e-6, "{rp}");

    let sp = loglik_sp(&sp_instance(), &p, &spec).unwrap();
    let e = 1f64.exp();
    assert!((sp - (e / (e + 2.0)).ln()).abs() < 1e-14);
    assert!((sp + 0.55144).abs() < 5e-6, "{sp}");

    let joint = loglik_joint(&rp_instance(), &sp_instance(), &p, &spec).unwrap();
    assert!((joint - (rp + sp)).abs() < 1e-14);
    assert!((joint + 1.12896).abs() < 1e-5, "{joint}");
    assert_eq!(loglik_joint(&rp_instance(), &empty_sp, &p, &spec).unwrap(), rp);
    assert_eq!(loglik_joint(&empty_rp, &sp_instance(), &p, &spec).unwrap(), sp);
}

#[test]
fn vanishing_scale_gives_uniform_sp_choices() {
    let spec = tiny_business();
    let p = params(&spec, &[("b_x", 3.0), ("log_mu", -800.0)]);
    let mut all = sp_instance().observations;
    all.extend(sp_instance().observations);
    let sp = dataset(Scope::Sp, Purpose::Business, all);
    assert!((loglik_sp(&sp, &p, &spec).unwrap() - 2.0 * (1.0f64 / 3.0).ln()).abs() < 1e-12);
}

#[test]
fn zero_probability_is_an_error_naming_the_observation() {
    let spec = tiny_business();
    let p = params(&spec, &[("b_x", 1e308)]);
    let mut ds = sp_instance();
    ds.observations[0].nests[0].alternatives[1].attributes.insert("x".into(), -1.0);
    ds.observations[0].chosen_alt = 1;
    let err = loglik_sp(&ds, &p, &spec).unwrap_err();
    assert!(err.to_string().contains("`sp`"), "{err}");
}

fn binary_dataset(n: usize, share: f64, seed: u64) -> ChoiceDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dataset(
        Scope::Sp,
        Purpose::Business,
        (0..n)
            .map(|i| {
                let chosen = usize::from(rng.gen::<f64>() >= share);
                observation(&format!("o{i}"), Scope::Sp, Purpose::Business, &[&[(Mode::Airline, 0.0), (Mode::Lcc, 0.0)]], (0, chosen))
            })
            .collect(),
    )
}

fn constant_only() -> ModelSpec {
    let mut b = ModelSpecBuilder::new(Purpose::Business);
    b.mode_terms = vec![term(
        "asc_air",
        AttributeSource::Constant,
        AppliesTo::Modes([Mode::Airline].into_iter().collect()),
        TermScope::All,
    )];
    b.build().unwrap()
}

#[test]
fn binary_constant_has_the_closed_form_mle() {
    let spec = constant_only();
    let sp = binary_dataset(1000, 0.37, 9);
    let k = sp.observations.iter().filter(|o| o.chosen_alt == 0).count() as f64;
    let share = k / 1000.0;
    let rp = ChoiceDataset::empty(Scope::Rp, Purpose::Business);
    let controls = EstimationControls {
        tol: 1e-10,
        ..Default::default()
    };
    let r = estimate(&rp, &sp, &spec, &ParameterVector::zeros(spec.layout()), &controls).unwrap();
    assert!(r.convergence.converged);
    let a = r.get("asc_air").unwrap();
    assert!((a.estimate - (share / (1.0 - share)).ln()).abs() < 1e-8, "{}", a.estimate);
    let se = 1.0 / (1000.0 * share * (1.0 - share)).sqrt();
    assert!((a.std_error.unwrap() - se).abs() < 1e-4 * se);
}

fn simulated(spec: &ModelSpec, purpose: Purpose, n: usize, seed: u64) -> (ChoiceDataset, ChoiceDataset) {
    let pop = simulate_population(n, &Marginals::survey(), seed).unwrap();
    simulate_choices(&pop, &design_scenario(), &reference_truth(purpose), spec, TripsPerPerson { rp: 1, sp: 2 }, seed).unwrap()
}

#[test]
fn estimate_invariants_on_the_fixture() {
    let set = common::load(Purpose::Business);
    let zero = ParameterVector::zeros(set.spec.layout());
    let r = estimate(&set.rp, &set.sp, &set.spec, &zero, &EstimationControls::default()).unwrap();
    assert!(r.convergence.converged);
    assert!(r.convergence.gradient_norm < r.convergence.tolerance);
    assert_eq!(r.parameters.len(), 16);
    assert_eq!(r.ll0, null_loglik(&set.rp, &set.sp, &set.spec).unwrap());
    assert!(r.ll1 >= r.ll0);
    assert_eq!(r.rho, 1.0 - r.ll1 / r.ll0);
    assert!((0.0..1.0).contains(&r.rho));
    let fs = fit_stats(r.ll1, &set.rp, &set.sp, &set.spec, r.k).unwrap();
    assert_eq!((fs.rho, fs.rho_adj), (r.rho, r.rho_adj));
    assert_eq!(r.n_rp, 407);
    assert_eq!(r.sp_persons, 608);

    // Restarting at the optimum is already stationary.
    let again = estimate(&set.rp, &set.sp, &set.spec, &r.estimates(), &EstimationControls::default()).unwrap();
    assert!(again.convergence.converged);
    assert!(again.convergence.iterations <= 5, "{}", again.convergence.iterations);
    for (a, b) in r.parameters.iter().zip(&again.parameters) {
        assert!((a.estimate - b.estimate).abs() < 1e-5, "{}", a.name);
    }
}

#[test]
fn start_at_truth_converges_quickly() {
    for purpose in [Purpose::Business, Purpose::NonBusiness] {
        let spec = common::spec(purpose);
        let (rp, sp) = simulated(&spec, purpose, 3000, 41);
        let truth = pack_parameters(&spec, &reference_truth(purpose)).unwrap();
        let r = estimate(&rp, &sp, &spec, &truth, &EstimationControls::default()).unwrap();
        assert!(r.convergence.converged, "{purpose}");
        assert!(r.ll1 >= loglik_joint(&rp, &sp, &truth, &spec).unwrap());
        eprintln!("{purpose}: {} iterations from truth", r.convergence.iterations);
    }
}

#[test]
fn iteration_cap_reports_instead_of_failing() {
    let set = common::load(Purpose::NonBusiness);
    let controls = EstimationControls {
        max_iter: 1,
        ..Default::default()
    };
    let zero = ParameterVector::zeros(set.spec.layout());
    let r = estimate(&set.rp, &set.sp, &set.spec, &zero, &controls).unwrap();
    assert!(!r.convergence.converged);
    assert!(r.ll1 >= r.ll0);
}

#[test]
fn non_finite_start_is_an_error() {
    let set = common::load_small();
    let mut start = ParameterVector::zeros(set.spec.layout());
    start.values[0] = f64::NAN;
    assert!(estimate(&set.rp, &set.sp, &set.spec, &start, &EstimationControls::default()).is_err());
}

#[test]
fn loglik_is_permutation_invariant_and_reduction_stable() {
    let set = common::load(Purpose::NonBusiness);
    let p = pack_parameters(&set.spec, &common::truth(Purpose::NonBusiness)).unwrap();
    let base = loglik_joint(&set.rp, &set.sp, &p, &set.spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut rp, mut sp) = (set.rp.clone(), set.sp.clone());
    rp.observations.shuffle(&mut rng);
    sp.observations.shuffle(&mut rng);
    let shuffled = loglik_joint(&rp, &sp, &p, &set.spec).unwrap();
    assert!((base - shuffled).abs() < 1e-9 * base.abs().max(1.0));

    let theta = p.values.clone();
    let mut problem = Problem::new(&set.rp, &set.sp, &set.spec).unwrap();
    problem.reduction = Reduction::Unordered;
    let unordered = problem.loglik(&theta).unwrap();
    assert!((unordered - base).abs() < 1e-9 * base.abs());
    problem.reduction = Reduction::Ordered;
    let serial: f64 = problem.observations().iter().map(|o| o.loglik(&theta)).sum();
    let on = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| (problem.loglik(&theta).unwrap(), problem.loglik_gradient(&theta).unwrap().1))
    };
    let one = on(1);
    assert_eq!(one, on(2));
    assert_eq!(one, on(8));
    assert!((one.0 - serial).abs() < 1e-9 * serial.abs());
}

#[test]
fn gradient_of_absent_coefficients_is_exactly_zero() {
    let set = common::load(Purpose::Business);
    let no_sp = ChoiceDataset::empty(Scope::Sp, Purpose::Business);
    let p = pack_parameters(&set.spec, &common::truth(Purpose::Business)).unwrap();
    let g = gradient(&set.rp, &no_sp, &p, &set.spec).unwrap();
    for name in ["asc_hsr_sp", "asc_air_sp", "sd_air", "sd_lcc", "log_mu"] {
        assert_eq!(g[set.spec.layout().index_of(name).unwrap()], 0.0, "{name}");
    }
    assert_eq!(g.len(), 16);
}

#[test]
fn symmetric_data_has_zero_constant_gradient_at_zero() {
    let spec = constant_only();
    let sp = dataset(
        Scope::Sp,
        Purpose::Business,
        (0..4)
            .map(|i| observation(&format!("s{i}"), Scope::Sp, Purpose::Business, &[&[(Mode::Airline, 0.0), (Mode::Lcc, 0.0)]], (0, i % 2)))
            .collect(),
    );
    let rp = ChoiceDataset::empty(Scope::Rp, Purpose::Business);
    assert_eq!(gradient(&rp, &sp, &ParameterVector::zeros(spec.layout()), &spec).unwrap(), vec![0.0]);
}

#[test]
fn rescaling_an_attribute_rescales_its_coefficient() {
    let spec = common::spec(Purpose::Business);
    let (rp, sp) = simulated(&spec, Purpose::Business, 800, 5);
    let scale = |ds: &ChoiceDataset| {
        let mut d = ds.clone();
        for o in &mut d.observations {
            for n in &mut o.nests {
                for a in &mut n.alternatives {
                    *a.attributes.get_mut("travel_cost").unwrap() *= 10.0;
                }
            }
        }
        d
    };
    let zero = ParameterVector::zeros(spec.layout());
    let controls = EstimationControls {
        tol: 1e-8,
        ..Default::default()
    };
    let a = estimate(&rp, &sp, &spec, &zero, &controls).unwrap();
    let b = estimate(&scale(&rp), &scale(&sp), &spec, &zero, &controls).unwrap();
    let (ca, cb) = (a.get("b_cost").unwrap(), b.get("b_cost").unwrap());
    assert!((ca.estimate - 10.0 * cb.estimate).abs() < 1e-5 * ca.estimate.abs());
    assert!((ca.std_error.unwrap() - 10.0 * cb.std_error.unwrap()).abs() < 1e-3 * ca.std_error.unwrap());
    assert!((ca.z.unwrap() - cb.z.unwrap()).abs() < 1e-3 * ca.z.unwrap().abs());
    assert!((a.ll1 - b.ll1).abs() < 1e-7);
}

/// Binary logit with one attribute: ±1.96 SE intervals should cover the truth about 95% of the time.
#[test]
fn standard_errors_have_nominal_coverage() {
    let mut b = ModelSpecBuilder::new(Purpose::Business);
    b.mode_terms = vec![
        term("b_x", AttributeSource::Alternative("x".into()), AppliesTo::All, TermScope::All),
        term(
            "asc_air",
            AttributeSource::Constant,
            AppliesTo::Modes([Mode::Airline].into_iter().collect()),
            TermScope::All,
        ),
    ];
    let spec = b.build().unwrap();
    let (beta, alpha) = (-0.8, 0.4);
    let rp = ChoiceDataset::empty(Scope::Rp, Purpose::Business);
    let reps = 200;
    let mut covered = 0;
    for rep in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
        let obs = (0..400)
            .map(|i| {
                let (x1, x2): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
                let v = alpha + beta * (x1 - x2);
                let p = 1.0 / (1.0 + (-v).exp());
                let chosen = usize::from(rng.gen::<f64>() >= p);
                observation(&format!("o{i}"), Scope::Sp, Purpose::Business, &[&[(Mode::Airline, x1), (Mode::Lcc, x2)]], (0, chosen))
            })
            .collect();
        let sp = dataset(Scope::Sp, Purpose::Business, obs);
        let r = estimate(&rp, &sp, &spec, &ParameterVector::zeros(spec.layout()), &EstimationControls::default()).unwrap();
        let e = r.get("b_x").unwrap();
        if (e.estimate - beta).abs() <= 1.96 * e.std_error.unwrap() {
            covered += 1;
        }
    }
    let rate = f64::from(covered) / reps as f64;
    assert!((0.90..=0.99).contains(&rate), "coverage {rate}");
}

#[test]
fn unit_scale_and_flat_link_are_recovered() {
    let spec = common::spec(Purpose::Business);
    let mut truth = reference_truth(Purpose::Business);
    for (k, v) in truth.iter_mut() {
        if k.starts_with("w_") || k == "log_mu" {
            *v = 0.0;
        }
    }
    let report = recovery_test(&spec, &truth, 3000, 17, &RecoveryTolerances::default());
    assert!(report.converged, "{:?}", report.failure);
    let mu = report.get("log_mu").unwrap();
    assert!(mu.z.unwrap().abs() <= 3.0, "{mu:?}");
}
