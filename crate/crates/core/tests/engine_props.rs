mod common;

use intercity::engine::{conditional_mode_prob, evaluate_observation, logsum};
use intercity::forecast::accessibility_from_utilities;
use intercity::spec::{unpack_parameters, Mode, ModelSpec, ParameterVector, Purpose, Scope};
use intercity::synth::{bruteforce_prob, random_instance, random_instance_spec, InstanceRanges, RandomInstance};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64, ranges: &InstanceRanges) -> (ModelSpec, RandomInstance) {
    let spec = random_instance_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = random_instance(&spec, ranges, &mut rng).unwrap();
    (spec, inst)
}

fn with(params: &ParameterVector, name: &str, value: f64) -> ParameterVector {
    let mut p = params.clone();
    let i = p.layout.index_of(name).unwrap();
    p.values[i] = value;
    p
}

fn asc(mode: Mode) -> String {
    format!("asc_{}", mode.as_str().to_lowercase())
}

/// Flat MNL over every (destination, mode) leaf with utility b_c·c + s·(b_x·x + asc).
fn flat_mnl(inst: &RandomInstance, spec: &ModelSpec) -> Vec<Vec<f64>> {
    let named = unpack_parameters(&inst.params, spec).unwrap();
    let s = if inst.observation.scope == Scope::Sp { named["log_mu"].exp() } else { 1.0 };
    let u: Vec<Vec<f64>> = inst
        .observation
        .nests
        .iter()
        .map(|n| {
            n.alternatives
                .iter()
                .map(|a| {
                    let c = named["b_c"] * n.attributes["c"];
                    let v = named["b_x"] * a.attributes["x"] + named.get(&asc(a.mode)).copied().unwrap_or(0.0);
                    c + s * v
                })
                .collect()
        })
        .collect();
    let total: f64 = u.iter().flatten().map(|x| x.exp()).sum();
    u.iter().map(|r| r.iter().map(|x| x.exp() / total).collect()).collect()
}

fn joint_table(inst: &RandomInstance, spec: &ModelSpec) -> Vec<Vec<f64>> {
    let e = evaluate_observation(&inst.observation, &inst.params, spec).unwrap();
    (0..inst.observation.nests.len())
        .map(|d| (0..inst.observation.nests[d].alternatives.len()).map(|a| e.joint(d, a)).collect())
        .collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn engine_matches_enumeration(seed in any::<u64>()) {
        let (spec, inst) = instance(seed, &InstanceRanges::default());
        let named = unpack_parameters(&inst.params, &spec).unwrap();
        let oracle = bruteforce_prob(&inst.observation, &named, &spec).unwrap();
        prop_assert!(max_diff(&joint_table(&inst, &spec), &oracle) < 1e-10);
    }

    #[test]
    fn probabilities_are_normalised(seed in any::<u64>()) {
        let (spec, inst) = instance(seed, &InstanceRanges::default());
        let e = evaluate_observation(&inst.observation, &inst.params, &spec).unwrap();
        prop_assert!((e.marginal_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for c in &e.conditional_probs {
            prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(c.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        let total: f64 = joint_table(&inst, &spec).iter().flatten().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_lambda_collapses_to_flat_mnl(seed in any::<u64>()) {
        let (spec, inst) = instance(seed, &InstanceRanges::default());
        let inst = RandomInstance { params: with(&inst.params, "w_const", 60.0), lambda: 1.0, ..inst };
        prop_assert!(max_diff(&joint_table(&inst, &spec), &flat_mnl(&inst, &spec)) < 1e-12);
    }

    #[test]
    fn unit_scale_sp_equals_rp(seed in any::<u64>()) {
        let (spec, inst) = instance(seed, &InstanceRanges::default());
        let params = with(&inst.params, "log_mu", 0.0);
        let mut rp = inst.observation.clone();
        rp.scope = Scope::Rp;
        rp.nests.iter_mut().for_each(|n| n.alternatives.retain(|a| a.mode != Mode::Hsr));
        prop_assume!(rp.nests.iter().all(|n| !n.alternatives.is_empty()));
        let mut sp = rp.clone();
        sp.scope = Scope::Sp;
        sp.chosen_nest = 0;
        sp.chosen_alt = 0;
        rp.chosen_nest = 0;
        rp.chosen_alt = 0;
        let a = evaluate_observation(&rp, &params, &spec).unwrap();
        let b = evaluate_observation(&sp, &params, &spec).unwrap();
        for d in 0..rp.nests.len() {
            for m in 0..rp.nests[d].alternatives.len() {
                prop_assert!((a.joint(d, m) - b.joint(d, m)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sp_depends_on_scale_times_mode_coefficients(seed in any::<u64>(), c in 0.3f64..3.0) {
        let (spec, inst) = instance(seed, &InstanceRanges::default());
        prop_assume!(inst.observation.scope == Scope::Sp);
        let mut scaled = inst.params.clone();
        for (i, e) in spec.layout().entries().iter().enumerate() {
            if e.name == "b_x" || e.name.starts_with("asc_") {
                scaled.values[i] /= c;
            }
            if e.name == "log_mu" {
                scaled.values[i] += c.ln();
            }
        }
        let b = RandomInstance { params: scaled, ..inst.clone() };
        prop_assert!(max_diff(&joint_table(&inst, &spec), &joint_table(&b, &spec)) < 1e-12);
    }

    #[test]
    fn huge_utilities_stay_normalised(seed in any::<u64>()) {
        let (spec, mut inst) = instance(seed, &InstanceRanges::default());
        for n in &mut inst.observation.nests {
            n.attributes.values_mut().for_each(|v| *v *= 1e4);
            for a in &mut n.alternatives {
                a.attributes.values_mut().for_each(|v| *v *= 1e4);
            }
        }
        let t = joint_table(&inst, &spec);
        prop_assert!(t.iter().flatten().all(|p| p.is_finite()));
        prop_assert!((t.iter().flatten().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shifting_a_nest_leaves_conditionals_unchanged(
        v in proptest::collection::vec(-5.0f64..5.0, 1..6),
        shift in -50.0f64..50.0,
        lambda in 0.05f64..1.0,
    ) {
        let modes = &Mode::ALL[..v.len()];
        let base: Vec<(Mode, f64)> = modes.iter().copied().zip(v.iter().copied()).collect();
        let moved: Vec<(Mode, f64)> = base.iter().map(|(m, x)| (*m, x + shift)).collect();
        for m in modes {
            let a = conditional_mode_prob(&base, lambda, *m).unwrap();
            let b = conditional_mode_prob(&moved, lambda, *m).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
        let ls: Vec<f64> = v.clone();
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        prop_assert!((logsum(&shifted, lambda).unwrap() - logsum(&ls, lambda).unwrap() - shift / lambda).abs() < 1e-9);
    }

    #[test]
    fn accessibility_laws(
        v in proptest::collection::vec(-5.0f64..5.0, 1..8),
        extra in -5.0f64..5.0,
        a in -10.0f64..10.0,
        mu3 in 0.1f64..5.0,
    ) {
        let base = accessibility_from_utilities(&v, mu3).unwrap();
        let mut rev = v.clone();
        rev.reverse();
        prop_assert!((accessibility_from_utilities(&rev, mu3).unwrap() - base).abs() < 1e-12);
        let moved: Vec<f64> = v.iter().map(|x| x + a).collect();
        prop_assert!((accessibility_from_utilities(&moved, mu3).unwrap() - base - a).abs() < 1e-12);
        let mut more = v.clone();
        more.push(extra);
        prop_assert!(accessibility_from_utilities(&more, mu3).unwrap() >= base);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((accessibility_from_utilities(&v, 1e8).unwrap() - max).abs() < 1e-6);
    }
}

#[test]
fn accessibility_examples() {
    assert_eq!(accessibility_from_utilities(&[2.0], 1.0).unwrap(), 2.0);
    let two = accessibility_from_utilities(&[1.0, 1.0], 1.0).unwrap();
    assert!((two - (1.0 + 2f64.ln())).abs() < 1e-15);
    assert!((two - 1.6931).abs() < 1e-4);
    assert!(accessibility_from_utilities(&[], 1.0).is_err());
}

#[test]
fn fixture_probabilities_are_normalised() {
    for set in [common::load(Purpose::Business), common::load(Purpose::NonBusiness), common::load_small()] {
        let params = intercity::spec::pack_parameters(&set.spec, &common::truth(set.spec.purpose)).unwrap();
        for o in set.rp.observations.iter().chain(&set.sp.observations) {
            let e = evaluate_observation(o, &params, &set.spec).unwrap();
            let total: f64 =
                (0..o.nests.len()).flat_map(|d| (0..o.nests[d].alternatives.len()).map(move |a| (d, a))).map(|(d, a)| e.joint(d, a)).sum();
            assert!((total - 1.0).abs() < 1e-12, "{}: {total}", o.id);
        }
    }
}
