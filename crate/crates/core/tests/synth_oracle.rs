mod common;

use std::collections::BTreeMap;

use intercity::data::ChoiceDataset;
use intercity::engine::evaluate_observation;
use intercity::spec::{pack_parameters, Mode, ModelSpec, NamedParams, Purpose};
use intercity::synth::{design_scenario, reference_truth, simulate_choices, simulate_population, Marginals, TripsPerPerson};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const DRAWS: usize = 100_000;

fn zeros(spec: &ModelSpec) -> NamedParams {
    spec.layout().names().map(|n| (n.to_string(), 0.0)).collect()
}

#[test]
fn equiprobable_modes_split_evenly() {
    let spec = common::spec(Purpose::NonBusiness);
    let mut scenario = design_scenario();
    scenario.regions.retain(|r| r.region.id == 2);
    scenario.regions[0].available_modes = [Mode::Bus, Mode::Car].into_iter().collect();
    let pop = simulate_population(DRAWS, &Marginals::survey(), 4).unwrap();
    let (rp, _) = simulate_choices(&pop, &scenario, &zeros(&spec), &spec, TripsPerPerson { rp: 1, sp: 0 }, 4).unwrap();
    assert_eq!(rp.len(), DRAWS);
    let bus = rp.observations.iter().filter(|o| o.chosen_mode() == Mode::Bus).count() as f64 / DRAWS as f64;
    assert!((bus - 0.5).abs() < 0.01, "{bus}");
}

/// Observed cell counts against the sum of per-observation engine probabilities.
fn check_frequencies(ds: &ChoiceDataset, spec: &ModelSpec, params: &NamedParams) {
    let p = pack_parameters(spec, params).unwrap();
    let mut expected: BTreeMap<(u32, Mode), (f64, f64)> = BTreeMap::new();
    let mut observed: BTreeMap<(u32, Mode), f64> = BTreeMap::new();
    for o in &ds.observations {
        let e = evaluate_observation(o, &p, spec).unwrap();
        for (d, n) in o.nests.iter().enumerate() {
            for (a, alt) in n.alternatives.iter().enumerate() {
                let q = e.joint(d, a);
                let cell = expected.entry((n.region, alt.mode)).or_default();
                cell.0 += q;
                cell.1 += q * (1.0 - q);
            }
        }
        *observed.entry((o.nests[o.chosen_nest].region, o.chosen_mode())).or_default() += 1.0;
    }
    let mut chi2 = 0.0;
    for (cell, (mean, var)) in &expected {
        let obs = observed.get(cell).copied().unwrap_or(0.0);
        assert!((obs - mean).abs() <= 3.0 * var.sqrt(), "{cell:?}: observed {obs}, expected {mean:.1} ± {:.1}", var.sqrt());
        chi2 += (obs - mean).powi(2) / mean;
    }
    let df = (expected.len() - 1) as f64;
    let p_value = 1.0 - ChiSquared::new(df).unwrap().cdf(chi2);
    assert!(p_value > 0.001, "chi-square {chi2:.1} on {df} df, p = {p_value:.2e}");
}

#[test]
fn simulated_choices_follow_engine_probabilities() {
    for (purpose, sp_draws) in [(Purpose::Business, 1), (Purpose::NonBusiness, 1)] {
        let spec = common::spec(purpose);
        let truth = reference_truth(purpose);
        let pop = simulate_population(DRAWS, &Marginals::survey(), 21).unwrap();
        let (rp, sp) = simulate_choices(&pop, &design_scenario(), &truth, &spec, TripsPerPerson { rp: 1, sp: sp_draws }, 21).unwrap();
        assert_eq!(rp.len(), DRAWS);
        check_frequencies(&rp, &spec, &truth);
        check_frequencies(&sp, &spec, &truth);
    }
}

#[test]
fn zero_trips_give_empty_datasets() {
    let spec = common::spec(Purpose::Business);
    let pop = simulate_population(20, &Marginals::survey(), 1).unwrap();
    let (rp, sp) = simulate_choices(&pop, &design_scenario(), &reference_truth(Purpose::Business), &spec, TripsPerPerson { rp: 0, sp: 0 }, 1)
        .unwrap();
    assert!(rp.is_empty() && sp.is_empty());
}

#[test]
fn simulation_is_seed_deterministic() {
    let spec = common::spec(Purpose::NonBusiness);
    let truth = reference_truth(Purpose::NonBusiness);
    let run = |seed| {
        let pop = simulate_population(300, &Marginals::survey(), seed).unwrap();
        simulate_choices(&pop, &design_scenario(), &truth, &spec, TripsPerPerson::default(), seed).unwrap()
    };
    assert_eq!(run(8), run(8));
    assert_ne!(run(8), run(9));
    assert_eq!(simulate_population(50, &Marginals::survey(), 3).unwrap(), simulate_population(50, &Marginals::survey(), 3).unwrap());
}
