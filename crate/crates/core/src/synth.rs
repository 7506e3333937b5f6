//! Synthetic populations, forward-simulated choices and counts, and the
//! brute-force probability oracle.

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_covariates, trip_context, Attributes, ChoiceDataset, ChoiceObservation, DestinationNest, Education, Gender,
    Marital, ModeAlternative, Occupation, Person, STATE_DEPENDENCE_KEY,
};
use crate::engine::{compile_observation, systematic_utility, Alternative, UtilityContext};
use crate::error::{Error, Result};
use crate::estimation::{estimate, EstimationControls, EstimationResult};
use crate::forecast::{LevelOfService, Scenario, ScenarioContext, ScenarioRegion};
use crate::spec::{
    build_choice_set, pack_parameters, AppliesTo, AttributeSource, LambdaTerm, Mode, ModelSpec, ModelSpecBuilder,
    NamedParams, ParamKind, ParameterVector, Purpose, Region, RegionId, Scope, TermScope, UtilityTerm,
};
use crate::tripgen::{fit_from_coefficients, InterceptMode, RegressionFit, RegressionModel, TripGenRecord, INTERCEPT};

const POPULATION_STREAM: u64 = 0x706f_7075_6c61_7465;
const CHOICE_STREAM: u64 = 0x6368_6f69_6365_7321;
const COUNT_STREAM: u64 = 0x636f_756e_7473_2121;

/// Largest tree the brute-force oracle will enumerate.
pub const BRUTEFORCE_MAX_LEAVES: usize = 64;

/// Levels multiplying each SP attribute.
pub const SP_LEVELS: [f64; 3] = [0.7, 1.0, 1.3];

/// Range of the multiplicative jitter applied to RP level of service.
pub const RP_JITTER: (f64, f64) = (0.6, 1.4);

fn rng_for(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream(index);
    rng
}

/// Share table over a categorical attribute.
pub type Shares<T> = Vec<(T, f64)>;

/// Independent per-attribute marginals. Age and income are piecewise uniform over bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub age_bins: Shares<(f64, f64)>,
    pub male: f64,
    pub marital: Shares<Marital>,
    pub occupation: Shares<Occupation>,
    pub education: Shares<Education>,
    /// Monthly income bins, Mil VND.
    pub income_bins: Shares<(f64, f64)>,
    pub home_region: RegionId,
}

fn pct<T: Copy>(rows: &[(T, f64)]) -> Shares<T> {
    rows.iter().map(|(k, v)| (*k, v / 100.0)).collect()
}

impl Marginals {
    /// Shares from the household survey summary.
    pub fn survey() -> Self {
        Self {
            age_bins: pct(&[
                ((18.0, 20.0), 6.03),
                ((20.0, 30.0), 37.36),
                ((30.0, 40.0), 28.37),
                ((40.0, 50.0), 12.07),
                ((50.0, 60.0), 10.01),
                ((60.0, 75.0), 6.16),
            ]),
            male: 0.5315,
            marital: pct(&[(Marital::Single, 35.94), (Marital::Married, 61.49), (Marital::Other, 2.57)]),
            occupation: pct(&[
                (Occupation::GovernmentOfficial, 37.48),
                (Occupation::IndustrialLaborer, 7.83),
                (Occupation::Merchant, 7.83),
                (Occupation::HousewifeJoblessRetired, 11.04),
                (Occupation::Student, 18.87),
                (Occupation::Other, 16.94),
            ]),
            education: pct(&[
                (Education::SeniorHigh, 14.51),
                (Education::CollegeVocational, 18.61),
                (Education::Bachelor, 56.61),
                (Education::MasterDoctor, 5.01),
                (Education::Other, 5.26),
            ]),
            income_bins: pct(&[
                ((0.0, 1.6), 11.04),
                ((1.6, 3.0), 19.38),
                ((3.0, 5.0), 21.57),
                ((5.0, 10.0), 27.98),
                ((10.0, 15.0), 10.53),
                ((15.0, 20.0), 6.55),
                ((20.0, 30.0), 2.95),
            ]),
            home_region: 1,
        }
    }

    /// Each attribute's shares must be non-negative and sum to 1 within 1e-3.
    pub fn validate(&self) -> Result<()> {
        fn check<T>(name: &str, shares: &[(T, f64)]) -> Result<()> {
            if shares.is_empty() {
                return Err(Error::Validation(format!("marginal `{name}` has no categories")));
            }
            if let Some((_, v)) = shares.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Validation(format!("marginal `{name}` has an invalid share {v}")));
            }
            let total: f64 = shares.iter().map(|(_, v)| v).sum();
            if (total - 1.0).abs() > 1e-3 {
                return Err(Error::Validation(format!("marginal `{name}` sums to {total}, not 1")));
            }
            Ok(())
        }
        check("age", &self.age_bins)?;
        check("gender", &[((), self.male), ((), 1.0 - self.male)])?;
        if !(0.0..=1.0).contains(&self.male) {
            return Err(Error::Validation(format!("male share {} outside [0, 1]", self.male)));
        }
        check("marital", &self.marital)?;
        check("occupation", &self.occupation)?;
        check("education", &self.education)?;
        check("income", &self.income_bins)?;
        for (name, bins, low) in [("age", &self.age_bins, 18.0), ("income", &self.income_bins, 0.0)] {
            if let Some(((a, b), _)) = bins.iter().find(|((a, b), _)| !(a <= b && *a >= low)) {
                return Err(Error::Validation(format!("marginal `{name}` has an invalid bin [{a}, {b}]")));
            }
        }
        Ok(())
    }
}

fn pick<T: Copy, R: Rng>(shares: &[(T, f64)], rng: &mut R) -> T {
    let dist = WeightedIndex::new(shares.iter().map(|(_, w)| *w)).expect("validated shares");
    shares[dist.sample(rng)].0
}

fn uniform_in<R: Rng>(bins: &[((f64, f64), f64)], rng: &mut R) -> f64 {
    let (a, b) = pick(bins, rng);
    if a == b {
        a
    } else {
        rng.gen_range(a..b)
    }
}

fn draw_person(index: usize, m: &Marginals, seed: u64) -> Person {
    let mut rng = rng_for(seed, POPULATION_STREAM, index as u64);
    let age = uniform_in(&m.age_bins, &mut rng);
    let gender = if rng.gen::<f64>() < m.male { Gender::Male } else { Gender::Female };
    let marital = pick(&m.marital, &mut rng);
    let occupation = pick(&m.occupation, &mut rng);
    let education = pick(&m.education, &mut rng);
    let income = uniform_in(&m.income_bins, &mut rng);
    Person {
        id: format!("P{:05}", index + 1),
        age,
        gender,
        marital,
        occupation,
        education,
        income,
        working: !matches!(occupation, Occupation::HousewifeJoblessRetired | Occupation::Student),
        home_region: m.home_region,
    }
}

/// `n` persons with attributes drawn independently from `marginals`.
/// Person `i` draws from its own stream, so output does not depend on thread count.
pub fn simulate_population(n: usize, marginals: &Marginals, seed: u64) -> Result<Vec<Person>> {
    marginals.validate()?;
    Ok((0..n).into_par_iter().map(|i| draw_person(i, marginals, seed)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripsPerPerson {
    pub rp: usize,
    pub sp: usize,
}

impl Default for TripsPerPerson {
    fn default() -> Self {
        Self { rp: 1, sp: 2 }
    }
}

fn mode_los(mode: Mode, d: f64) -> LevelOfService {
    let (cost, ivt, access, freq) = match mode {
        Mode::Bus => (0.00045 * d, d / 50.0, 0.5, Some(20.0)),
        Mode::ConventionalRail => (0.0006 * d, d / 55.0, 0.6, Some(6.0)),
        Mode::Airline => (0.8 + 0.001 * d, 0.5 + d / 700.0, 1.5, Some(10.0)),
        Mode::Lcc => (0.4 + 0.0006 * d, 0.5 + d / 700.0, 1.8, Some(4.0)),
        Mode::Car => (0.2 + 0.0012 * d, d / 60.0, 0.0, None),
        Mode::Hsr => (0.2 + 0.0009 * d, 0.3 + d / 250.0, 0.7, Some(30.0)),
    };
    LevelOfService {
        travel_cost: cost,
        in_vehicle_time: ivt,
        access_egress_time: access,
        frequency: freq,
    }
}

/// Seven-region corridor with every mode, HSR included, available everywhere.
/// Level of service follows distance-based cost and speed formulas.
pub fn design_scenario() -> Scenario {
    let rows: [(&str, f64, f64, f64, f64); 7] = [
        ("Coastal North", 60.0, 3.5, 3.2, 180.0),
        ("Northern Delta", 25.0, 1.2, 2.8, 280.0),
        ("Central Coast", 40.0, 2.0, 4.1, 760.0),
        ("South Central", 15.0, 3.8, 3.5, 1280.0),
        ("Highlands", 90.0, 2.5, 3.9, 1100.0),
        ("Southeast", 30.0, 1.0, 2.5, 1700.0),
        ("Southern Metro", 350.0, 5.0, 4.4, 1850.0),
    ];
    let mut regions = Vec::new();
    let mut los = BTreeMap::new();
    for (i, (name, gdp, tourists, attraction, d)) in rows.into_iter().enumerate() {
        let id = i as RegionId + 1;
        regions.push(ScenarioRegion {
            region: Region {
                id,
                name: name.into(),
                gdp,
                tourist_count: tourists,
                attraction_score: attraction,
                distance_km: d,
            },
            available_modes: Mode::ALL.into_iter().collect(),
        });
        for m in Mode::ALL {
            los.insert((id, m), mode_los(m, d));
        }
    }
    let context = ScenarioContext {
        summer: 0.3,
        with_family: 0.4,
    };
    Scenario::new("hsr", context, regions, los).expect("design scenario is valid")
}

/// `design_scenario` with HSR withdrawn from every region.
pub fn design_base_scenario() -> Scenario {
    let mut s = design_scenario();
    s.name = "base".into();
    for r in &mut s.regions {
        r.available_modes.remove(&Mode::Hsr);
    }
    s.level_of_service.retain(|(_, m), _| *m != Mode::Hsr);
    s
}

/// Parameter values used to simulate the reference fixtures.
pub fn reference_truth(purpose: Purpose) -> NamedParams {
    let text = match purpose {
        Purpose::Business => include_str!("../fixtures/business/truth.toml"),
        Purpose::NonBusiness => include_str!("../fixtures/non_business/truth.toml"),
    };
    parse_params(text).expect("reference truth parses")
}

/// Reads a flat `name = value` TOML table.
pub fn parse_params(text: &str) -> Result<NamedParams> {
    let table: BTreeMap<String, toml::Value> = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    table
        .into_iter()
        .map(|(k, v)| {
            let x = match v {
                toml::Value::Float(f) => f,
                toml::Value::Integer(i) => i as f64,
                other => return Err(Error::Parse(format!("parameter `{k}`: expected a number, found {other}"))),
            };
            Ok((k, x))
        })
        .collect()
}

fn bernoulli<R: Rng>(p: f64, rng: &mut R) -> bool {
    rng.gen::<f64>() < p
}

fn draw_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

fn los_for(scenario: &Scenario, region: RegionId, mode: Mode) -> Result<LevelOfService> {
    scenario.los(region, mode).copied().ok_or_else(|| {
        Error::Validation(format!(
            "scenario `{}` has no level of service for {mode} at region {region}",
            scenario.name
        ))
    })
}

fn scaled(los: &LevelOfService, mut factor: impl FnMut() -> f64) -> Attributes {
    let mut a = Attributes::new();
    a.insert("travel_cost".into(), los.travel_cost * factor());
    a.insert("in_vehicle_time".into(), los.in_vehicle_time * factor());
    a.insert("access_egress_time".into(), los.access_egress_time * factor());
    if let Some(f) = los.frequency {
        a.insert("frequency".into(), f * factor());
    }
    a
}

fn region_attributes(r: &Region) -> Attributes {
    r.attributes().iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Draws the chosen leaf from the exact model probabilities, destination first.
fn sample_choice<R: Rng>(obs: &mut ChoiceObservation, spec: &ModelSpec, theta: &[f64], rng: &mut R) -> Result<()> {
    let eval = compile_observation(obs, spec)?.evaluate(theta);
    let d = draw_index(&eval.marginal_probs, rng);
    let a = draw_index(&eval.conditional_probs[d], rng);
    obs.chosen_nest = d;
    obs.chosen_alt = a;
    Ok(())
}

struct PersonChoices {
    rp: Vec<ChoiceObservation>,
    sp: Vec<ChoiceObservation>,
}

fn rp_observation<R: Rng>(
    person: &Person,
    id: String,
    scenario: &Scenario,
    spec: &ModelSpec,
    theta: &[f64],
    rng: &mut R,
) -> Result<ChoiceObservation> {
    let trip = trip_context(
        Some(bernoulli(scenario.context.summer, rng)),
        Some(bernoulli(scenario.context.with_family, rng)),
    );
    let mut nests = Vec::new();
    for r in &scenario.regions {
        let candidates: BTreeSet<Mode> = r.available_modes.intersection(spec.universe(Scope::Rp)).copied().collect();
        if candidates.is_empty() {
            continue;
        }
        let Ok(set) = build_choice_set(r.region.distance_km, &candidates, Scope::Rp, &spec.choice_sets) else {
            continue;
        };
        let mut alternatives = Vec::new();
        for m in set {
            let los = los_for(scenario, r.region.id, m)?;
            let attributes = scaled(&los, || rng.gen_range(RP_JITTER.0..RP_JITTER.1));
            alternatives.push(ModeAlternative { mode: m, attributes });
        }
        nests.push(DestinationNest {
            region: r.region.id,
            distance_km: r.region.distance_km,
            attributes: region_attributes(&r.region),
            alternatives,
        });
    }
    if nests.is_empty() {
        return Err(Error::Validation(format!("scenario `{}` offers no RP alternatives", scenario.name)));
    }
    let mut obs = ChoiceObservation {
        id,
        person_id: person.id.clone(),
        scope: Scope::Rp,
        purpose: spec.purpose,
        covariates: build_covariates(person, &trip, spec, Scope::Rp)?,
        rp_chosen_mode: None,
        nests,
        chosen_nest: 0,
        chosen_alt: 0,
    };
    sample_choice(&mut obs, spec, theta, rng)?;
    Ok(obs)
}

#[allow(clippy::too_many_arguments)]
fn sp_observation<R: Rng>(
    person: &Person,
    id: String,
    scenario: &Scenario,
    spec: &ModelSpec,
    theta: &[f64],
    reference: &ChoiceObservation,
    rng: &mut R,
) -> Result<ChoiceObservation> {
    let trip = trip_context(
        Some(bernoulli(scenario.context.summer, rng)),
        Some(bernoulli(scenario.context.with_family, rng)),
    );
    let rp_mode = reference.chosen_mode();
    let regions: Vec<&ScenarioRegion> = if spec.is_nested(Scope::Sp) {
        scenario.regions.iter().collect()
    } else {
        let target = reference.chosen_region();
        scenario.regions.iter().filter(|r| r.region.id == target).collect()
    };
    let mut nests = Vec::new();
    for r in regions {
        let Ok(set) = build_choice_set(r.region.distance_km, spec.universe(Scope::Sp), Scope::Sp, &spec.choice_sets) else {
            continue;
        };
        let mut attributes = region_attributes(&r.region);
        attributes.insert(
            "attraction_eval".into(),
            r.region.attraction_score * SP_LEVELS[rng.gen_range(0..SP_LEVELS.len())],
        );
        let mut alternatives = Vec::new();
        for m in set {
            let los = los_for(scenario, r.region.id, m)?;
            let mut attrs = scaled(&los, || SP_LEVELS[rng.gen_range(0..SP_LEVELS.len())]);
            attrs.insert(STATE_DEPENDENCE_KEY.into(), f64::from(u8::from(m == rp_mode)));
            alternatives.push(ModeAlternative { mode: m, attributes: attrs });
        }
        nests.push(DestinationNest {
            region: r.region.id,
            distance_km: r.region.distance_km,
            attributes,
            alternatives,
        });
    }
    if nests.is_empty() {
        return Err(Error::Validation(format!(
            "scenario `{}` offers no SP alternatives for person `{}`",
            scenario.name, person.id
        )));
    }
    let mut obs = ChoiceObservation {
        id,
        person_id: person.id.clone(),
        scope: Scope::Sp,
        purpose: spec.purpose,
        covariates: build_covariates(person, &trip, spec, Scope::Sp)?,
        rp_chosen_mode: Some(rp_mode),
        nests,
        chosen_nest: 0,
        chosen_alt: 0,
    };
    sample_choice(&mut obs, spec, theta, rng)?;
    Ok(obs)
}

fn simulate_person(
    index: usize,
    person: &Person,
    scenario: &Scenario,
    spec: &ModelSpec,
    theta: &[f64],
    trips: TripsPerPerson,
    seed: u64,
) -> Result<PersonChoices> {
    let mut rng = rng_for(seed, CHOICE_STREAM, index as u64);
    let mut rp = Vec::with_capacity(trips.rp);
    for t in 0..trips.rp {
        rp.push(rp_observation(person, format!("{}-r{}", person.id, t + 1), scenario, spec, theta, &mut rng)?);
    }
    let mut sp = Vec::with_capacity(trips.sp);
    if trips.sp > 0 {
        // Without recorded RP trips the SP answers still need an actual trip to anchor on.
        let hidden;
        let reference = match rp.first() {
            Some(r) => r,
            None => {
                hidden = rp_observation(person, format!("{}-ref", person.id), scenario, spec, theta, &mut rng)?;
                &hidden
            }
        };
        for s in 0..trips.sp {
            sp.push(sp_observation(
                person,
                format!("{}-s{}", person.id, s + 1),
                scenario,
                spec,
                theta,
                reference,
                &mut rng,
            )?);
        }
    }
    Ok(PersonChoices { rp, sp })
}

/// RP trips and SP answers for every person, drawn from the nested-logit
/// probabilities at `params_true`.
///
/// RP level of service is the scenario's, jittered per alternative; SP
/// attributes take a random cell of the three-level factorial around it.
/// SP state dependence refers to the person's first RP trip, or to an
/// unrecorded trip drawn for that purpose when no RP trips are requested.
pub fn simulate_choices(
    population: &[Person],
    scenario: &Scenario,
    params_true: &NamedParams,
    spec: &ModelSpec,
    trips: TripsPerPerson,
    seed: u64,
) -> Result<(ChoiceDataset, ChoiceDataset)> {
    let theta = pack_parameters(spec, params_true)?.values;
    let per_person: Vec<PersonChoices> = population
        .par_iter()
        .enumerate()
        .map(|(i, p)| simulate_person(i, p, scenario, spec, &theta, trips, seed))
        .collect::<Result<_>>()?;
    let mut rp = ChoiceDataset::empty(Scope::Rp, spec.purpose);
    let mut sp = ChoiceDataset::empty(Scope::Sp, spec.purpose);
    for pc in per_person {
        rp.observations.extend(pc.rp);
        sp.observations.extend(pc.sp);
    }
    Ok((rp, sp))
}

/// Annual trip counts drawn from `fit` given each person's accessibility.
///
/// Negative-binomial counts are gamma-Poisson mixtures with shape θ; linear
/// counts are the rounded prediction plus normal noise with the fit's σ, floored at 0.
pub fn simulate_trip_counts(
    population: &[Person],
    accessibility: &[f64],
    purpose: Purpose,
    fit: &RegressionFit,
    seed: u64,
) -> Result<Vec<TripGenRecord>> {
    if population.len() != accessibility.len() {
        return Err(Error::Validation(format!(
            "{} persons but {} accessibility values",
            population.len(),
            accessibility.len()
        )));
    }
    population
        .par_iter()
        .zip(accessibility)
        .enumerate()
        .map(|(i, (person, &acc))| {
            let mut rng = rng_for(seed, COUNT_STREAM, i as u64);
            let mut covariates = person.attributes();
            covariates.insert("accessibility".into(), acc);
            let eta = fit.linear_predictor(&covariates)?;
            let count = match &fit.model {
                RegressionModel::Linear { .. } => {
                    let sigma = fit.sigma.unwrap_or(0.0);
                    let noise = if sigma > 0.0 {
                        Normal::new(0.0, sigma).map_err(|e| Error::Validation(e.to_string()))?.sample(&mut rng)
                    } else {
                        0.0
                    };
                    (eta + noise).round().max(0.0)
                }
                RegressionModel::Poisson => poisson(eta.exp(), &mut rng)?,
                RegressionModel::NegativeBinomial => {
                    let theta = fit
                        .theta
                        .ok_or_else(|| Error::Validation("negative-binomial fit has no θ".into()))?;
                    let m = eta.exp();
                    let rate = Gamma::new(theta, m / theta)
                        .map_err(|e| Error::Validation(e.to_string()))?
                        .sample(&mut rng);
                    poisson(rate, &mut rng)?
                }
            };
            if !(count.is_finite() && count <= f64::from(u32::MAX)) {
                return Err(Error::Numerical(format!("simulated count {count} for person `{}`", person.id)));
            }
            Ok(TripGenRecord {
                person_id: person.id.clone(),
                purpose,
                annual_trip_count: count as u32,
                covariates,
            })
        })
        .collect()
}

/// Known trip-generation parameters, as read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripGenTruth {
    /// `negative_binomial`, `poisson` or `linear`.
    pub family: String,
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default)]
    pub sigma: Option<f64>,
    pub coefficients: BTreeMap<String, f64>,
}

impl TripGenTruth {
    /// A linear truth without an `(Intercept)` entry has its intercept fixed at zero.
    pub fn to_fit(&self) -> Result<RegressionFit> {
        let model = match self.family.as_str() {
            "negative_binomial" => RegressionModel::NegativeBinomial,
            "poisson" => RegressionModel::Poisson,
            "linear" => RegressionModel::Linear {
                intercept: if self.coefficients.contains_key(INTERCEPT) {
                    InterceptMode::Free
                } else {
                    InterceptMode::FixedZero
                },
            },
            other => return Err(Error::Config(format!("unknown regression family `{other}`"))),
        };
        if model == RegressionModel::NegativeBinomial && !self.theta.is_some_and(|t| t > 0.0) {
            return Err(Error::Config("negative-binomial truth needs theta > 0".into()));
        }
        let coefs: Vec<(&str, f64)> = self.coefficients.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        let mut fit = fit_from_coefficients(model, &coefs);
        fit.theta = self.theta;
        fit.sigma = self.sigma;
        Ok(fit)
    }
}

/// Per-purpose trip-generation truth from a TOML document with one table per purpose.
pub fn parse_tripgen_truth(text: &str) -> Result<BTreeMap<Purpose, RegressionFit>> {
    let raw: BTreeMap<Purpose, TripGenTruth> = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    raw.into_iter().map(|(p, t)| Ok((p, t.to_fit()?))).collect()
}

/// Trip-generation parameters used to simulate the reference fixtures.
pub fn reference_tripgen_truth() -> BTreeMap<Purpose, RegressionFit> {
    parse_tripgen_truth(include_str!("../fixtures/tripgen_truth.toml")).expect("reference trip-generation truth parses")
}

fn poisson<R: Rng>(rate: f64, rng: &mut R) -> Result<f64> {
    if rate <= 0.0 {
        return Ok(0.0);
    }
    Ok(Poisson::new(rate).map_err(|e| Error::Numerical(e.to_string()))?.sample(rng))
}

/// Joint probability of every leaf, `[nest][alternative]`, by direct
/// exponentiation of the nested weights exp(C_d)·S_d^(λ−1)·exp(V_m/λ).
/// No log-sum-exp shifting, so it is only meant for moderate utilities.
pub fn bruteforce_prob(obs: &ChoiceObservation, params: &NamedParams, spec: &ModelSpec) -> Result<Vec<Vec<f64>>> {
    let leaves = obs.num_leaves();
    if leaves > BRUTEFORCE_MAX_LEAVES {
        return Err(Error::Validation(format!(
            "instance too large for enumeration: {leaves} leaves (limit {BRUTEFORCE_MAX_LEAVES})"
        )));
    }
    if leaves == 0 {
        return Err(Error::Validation(format!("observation `{}` has no alternatives", obs.id)));
    }
    let nested = spec.is_nested(obs.scope);
    let lambda = if nested {
        let mut x = 0.0;
        for t in spec.lambda_terms.iter().filter(|t| t.scope.includes(obs.scope)) {
            let w = params
                .get(&t.coefficient)
                .ok_or_else(|| Error::Validation(format!("parameter `{}` missing", t.coefficient)))?;
            let k = obs.covariates.get(&t.covariate_key()).ok_or_else(|| {
                Error::Data(format!("observation `{}`: link covariate `{}` missing", obs.id, t.covariate_key()))
            })?;
            x += w * k;
        }
        1.0 / (1.0 + (-x).exp())
    } else {
        1.0
    };
    let ctx = UtilityContext {
        observation: obs,
        params,
        scope: obs.scope,
    };
    let mut weights = Vec::with_capacity(obs.nests.len());
    let mut total = 0.0;
    for nest in &obs.nests {
        let c = if nested {
            systematic_utility(&ctx, spec, Alternative::Destination(nest.region))?
        } else {
            0.0
        };
        let mut e = Vec::with_capacity(nest.alternatives.len());
        for alt in &nest.alternatives {
            let v = systematic_utility(&ctx, spec, Alternative::Mode(nest.region, alt.mode))?;
            e.push((v / lambda).exp());
        }
        let s: f64 = e.iter().sum();
        let factor = c.exp() * s.powf(lambda - 1.0);
        let w: Vec<f64> = e.iter().map(|x| x * factor).collect();
        total += w.iter().sum::<f64>();
        weights.push(w);
    }
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Numerical(format!(
            "observation `{}`: nested weights overflow direct enumeration",
            obs.id
        )));
    }
    for w in &mut weights {
        for x in w.iter_mut() {
            *x /= total;
        }
    }
    Ok(weights)
}

/// Mode parameters whose every term applies to both RP and SP data.
pub fn generic_coefficients(spec: &ModelSpec) -> BTreeSet<String> {
    let mut scopes: BTreeMap<&str, bool> = BTreeMap::new();
    for t in &spec.mode_terms {
        let all = t.scope == TermScope::All && t.source != AttributeSource::StateDependence;
        let entry = scopes.entry(t.coefficient.as_str()).or_insert(true);
        *entry &= all;
    }
    for t in &spec.destination_terms {
        scopes.insert(t.coefficient.as_str(), false);
    }
    scopes.into_iter().filter(|(_, g)| *g).map(|(k, _)| k.to_string()).collect()
}

/// Link parameters multiplying the constant covariate.
pub fn link_constants(spec: &ModelSpec) -> BTreeSet<String> {
    spec.lambda_terms
        .iter()
        .filter(|t| t.factors.is_empty())
        .map(|t| t.coefficient.clone())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryTolerances {
    /// Allowed |estimate − truth| in estimated standard errors.
    pub se_multiple: f64,
    /// Optional relative-error bound, applied when |truth| exceeds `relative_floor`.
    pub relative: Option<f64>,
    pub relative_floor: f64,
    pub trips: TripsPerPerson,
    pub controls: EstimationControls,
}

impl Default for RecoveryTolerances {
    fn default() -> Self {
        Self {
            se_multiple: 3.0,
            relative: None,
            relative_floor: 0.1,
            trips: TripsPerPerson::default(),
            controls: EstimationControls::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterRecovery {
    pub name: String,
    pub kind: ParamKind,
    pub truth: f64,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub bias: f64,
    /// (estimate − truth) / SE.
    pub z: Option<f64>,
    pub within_se: bool,
    pub within_relative: Option<bool>,
    pub sign_matches: bool,
    /// Generic coefficients, the scale and link constants are the ones the report is judged on.
    pub checked: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub purpose: Purpose,
    pub n: usize,
    pub seed: u64,
    pub n_rp: usize,
    pub n_sp: usize,
    pub converged: bool,
    /// Set when simulation or estimation failed.
    pub failure: Option<String>,
    pub parameters: Vec<ParameterRecovery>,
}

impl RecoveryReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
            && self.converged
            && self
                .parameters
                .iter()
                .filter(|p| p.checked)
                .all(|p| p.within_se && p.within_relative != Some(false) && (p.kind != ParamKind::LogScale || p.sign_matches))
    }

    pub fn get(&self, name: &str) -> Option<&ParameterRecovery> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn worst_z(&self) -> Option<f64> {
        self.parameters
            .iter()
            .filter(|p| p.checked)
            .filter_map(|p| p.z.map(f64::abs))
            .fold(None, |acc, z| Some(acc.map_or(z, |a: f64| a.max(z))))
    }
}

fn compare(
    spec: &ModelSpec,
    truth: &NamedParams,
    result: &EstimationResult,
    tol: &RecoveryTolerances,
) -> Vec<ParameterRecovery> {
    let generic = generic_coefficients(spec);
    let constants = link_constants(spec);
    result
        .parameters
        .iter()
        .map(|p| {
            let t = truth[&p.name];
            let bias = p.estimate - t;
            let z = p.std_error.filter(|s| *s > 0.0).map(|s| bias / s);
            let within_relative = tol
                .relative
                .filter(|_| t.abs() > tol.relative_floor)
                .map(|r| bias.abs() <= r * t.abs());
            ParameterRecovery {
                name: p.name.clone(),
                kind: p.kind,
                truth: t,
                estimate: p.estimate,
                std_error: p.std_error,
                bias,
                z,
                within_se: z.is_some_and(|z| z.abs() <= tol.se_multiple),
                within_relative,
                sign_matches: t.signum() == p.estimate.signum() || t == 0.0,
                checked: generic.contains(&p.name) || p.kind == ParamKind::LogScale || constants.contains(&p.name),
            }
        })
        .collect()
}

/// Simulates `n` persons on the design scenario, estimates from zero, and
/// compares each estimate with its true value. Failures are reported, not raised.
pub fn recovery_test(
    spec: &ModelSpec,
    params_true: &NamedParams,
    n: usize,
    seed: u64,
    tolerances: &RecoveryTolerances,
) -> RecoveryReport {
    recovery_test_on(spec, params_true, &design_scenario(), n, seed, tolerances)
}

pub fn recovery_test_on(
    spec: &ModelSpec,
    params_true: &NamedParams,
    scenario: &Scenario,
    n: usize,
    seed: u64,
    tolerances: &RecoveryTolerances,
) -> RecoveryReport {
    let mut report = RecoveryReport {
        purpose: spec.purpose,
        n,
        seed,
        n_rp: 0,
        n_sp: 0,
        converged: false,
        failure: None,
        parameters: Vec::new(),
    };
    let run = || -> Result<(usize, usize, EstimationResult)> {
        pack_parameters(spec, params_true)?;
        let population = simulate_population(n, &Marginals::survey(), seed)?;
        let (rp, sp) = simulate_choices(&population, scenario, params_true, spec, tolerances.trips, seed)?;
        let start = ParameterVector::zeros(spec.layout());
        let result = estimate(&rp, &sp, spec, &start, &tolerances.controls)?;
        Ok((rp.len(), sp.len(), result))
    };
    match run() {
        Ok((n_rp, n_sp, result)) => {
            report.n_rp = n_rp;
            report.n_sp = n_sp;
            report.converged = result.convergence.converged;
            if let Some(note) = &result.covariance_note {
                report.failure = Some(format!("standard errors unavailable: {note}"));
            }
            report.parameters = compare(spec, params_true, &result, tolerances);
        }
        Err(e) => report.failure = Some(e.to_string()),
    }
    report
}

/// Shape of the random instances used by the oracle-equivalence checks:
/// a generic attribute coefficient, mode constants, one destination
/// attribute, a constant-only logsum link and an SP scale.
pub fn random_instance_spec() -> ModelSpec {
    let term = |coefficient: &str, source: AttributeSource, applies_to: AppliesTo| UtilityTerm {
        coefficient: coefficient.into(),
        source,
        applies_to,
        scope: TermScope::All,
    };
    let mut b = ModelSpecBuilder::new(Purpose::NonBusiness);
    b.destination_terms = vec![term("b_c", AttributeSource::Alternative("c".into()), AppliesTo::All)];
    b.mode_terms = vec![term("b_x", AttributeSource::Alternative("x".into()), AppliesTo::All)];
    for m in [Mode::Bus, Mode::ConventionalRail, Mode::Airline, Mode::Car, Mode::Hsr] {
        b.mode_terms.push(term(
            &format!("asc_{}", m.as_str().to_lowercase()),
            AttributeSource::Constant,
            AppliesTo::Modes([m].into_iter().collect()),
        ));
    }
    b.lambda_terms = vec![LambdaTerm {
        coefficient: "w_const".into(),
        factors: vec![],
        scope: TermScope::All,
    }];
    b.scale = Some("log_mu".into());
    b.build().expect("random-instance spec is well formed")
}

/// Ranges of [`random_instance`]. λ stays above `lambda_min` so the
/// unshifted oracle weights cannot overflow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceRanges {
    pub max_destinations: usize,
    pub max_modes: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub mu: (f64, f64),
}

impl Default for InstanceRanges {
    fn default() -> Self {
        Self {
            max_destinations: 4,
            max_modes: 4,
            lambda_min: 0.02,
            lambda_max: 1.0,
            mu: (0.2, 5.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomInstance {
    pub observation: ChoiceObservation,
    pub params: ParameterVector,
    pub lambda: f64,
    pub mu: f64,
}

/// A random RP or SP tree for [`random_instance_spec`], with λ and μ drawn
/// uniformly from `ranges` and attributes and coefficients in [−1, 1].
pub fn random_instance<R: Rng>(spec: &ModelSpec, ranges: &InstanceRanges, rng: &mut R) -> Result<RandomInstance> {
    let scope = if rng.gen_bool(0.5) { Scope::Rp } else { Scope::Sp };
    let lambda = rng.gen_range(ranges.lambda_min..ranges.lambda_max);
    let mu = rng.gen_range(ranges.mu.0..=ranges.mu.1);
    let pool: Vec<Mode> = Mode::ALL.iter().copied().filter(|m| scope == Scope::Sp || *m != Mode::Hsr).collect();
    let n_dest = rng.gen_range(1..=ranges.max_destinations);
    let nests: Vec<DestinationNest> = (0..n_dest)
        .map(|d| {
            let k = rng.gen_range(1..=ranges.max_modes.min(pool.len()));
            let modes = rand::seq::index::sample(rng, pool.len(), k);
            DestinationNest {
                region: d as RegionId + 1,
                distance_km: 500.0,
                attributes: [("c".to_string(), rng.gen_range(-1.0..1.0))].into_iter().collect(),
                alternatives: modes
                    .iter()
                    .map(|i| ModeAlternative {
                        mode: pool[i],
                        attributes: [("x".to_string(), rng.gen_range(-1.0..1.0))].into_iter().collect(),
                    })
                    .collect(),
            }
        })
        .collect();
    let chosen_nest = rng.gen_range(0..nests.len());
    let chosen_alt = rng.gen_range(0..nests[chosen_nest].alternatives.len());
    let observation = ChoiceObservation {
        id: "random".into(),
        person_id: "random".into(),
        scope,
        purpose: spec.purpose,
        covariates: [("constant".to_string(), 1.0)].into_iter().collect(),
        rp_chosen_mode: None,
        nests,
        chosen_nest,
        chosen_alt,
    };
    let mut named = NamedParams::new();
    for e in spec.layout().entries() {
        let v = match e.kind {
            ParamKind::LambdaLink => (lambda / (1.0 - lambda)).ln(),
            ParamKind::LogScale => mu.ln(),
            _ => rng.gen_range(-1.0..1.0),
        };
        named.insert(e.name.clone(), v);
    }
    Ok(RandomInstance {
        observation,
        params: pack_parameters(spec, &named)?,
        lambda,
        mu,
    })
}
