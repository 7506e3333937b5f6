//! Logsum accessibility and the scenario pipeline: level of service → choice
//! probabilities → accessibility → trip generation → destination/mode demand.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_covariates, Attributes, ChoiceObservation, DestinationNest, ModeAlternative, Person, RegionTable, STATE_DEPENDENCE_KEY};
use crate::engine::compile_observation;
use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;
use crate::spec::{
    build_choice_set, AppliesTo, AttributeSource, Mode, ModelSpec, ModelSpecBuilder, NamedParams, ParameterVector, Purpose, Region,
    RegionId, Scope, TermScope, UtilityTerm,
};
use crate::tripgen::{predict_trips, RegressionFit};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioContext {
    /// Expected share of trips made in summer.
    #[serde(default)]
    pub summer: f64,
    /// Expected share of trips made with family.
    #[serde(default)]
    pub with_family: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelOfService {
    pub travel_cost: f64,
    pub in_vehicle_time: f64,
    pub access_egress_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<f64>,
}

impl LevelOfService {
    pub fn attributes(&self) -> Attributes {
        let mut a = Attributes::new();
        a.insert("travel_cost".into(), self.travel_cost);
        a.insert("in_vehicle_time".into(), self.in_vehicle_time);
        a.insert("access_egress_time".into(), self.access_egress_time);
        if let Some(f) = self.frequency {
            a.insert("frequency".into(), f);
        }
        a
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let vals = [
            ("travel_cost", Some(self.travel_cost)),
            ("in_vehicle_time", Some(self.in_vehicle_time)),
            ("access_egress_time", Some(self.access_egress_time)),
            ("frequency", self.frequency),
        ];
        for (name, v) in vals {
            if let Some(v) = v {
                if !v.is_finite() || v < 0.0 {
                    return Err(format!("{name} = {v} must be finite and >= 0"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioRegion {
    pub region: Region,
    pub available_modes: BTreeSet<Mode>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub context: ScenarioContext,
    pub regions: Vec<ScenarioRegion>,
    pub level_of_service: BTreeMap<(RegionId, Mode), LevelOfService>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionEntry {
    id: RegionId,
    name: String,
    gdp: f64,
    tourist_count: f64,
    attraction_score: f64,
    distance_km: f64,
    available_modes: Vec<Mode>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LosEntry {
    region: RegionId,
    mode: Mode,
    #[serde(flatten)]
    los: LevelOfService,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    #[serde(default)]
    context: ScenarioContext,
    regions: Vec<RegionEntry>,
    level_of_service: Vec<LosEntry>,
}

impl Scenario {
    pub fn new(
        name: impl Into<String>,
        context: ScenarioContext,
        regions: Vec<ScenarioRegion>,
        level_of_service: BTreeMap<(RegionId, Mode), LevelOfService>,
    ) -> Result<Self> {
        let s = Self {
            name: name.into(),
            context,
            regions,
            level_of_service,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Error::Validation(format!("scenario `{}`: {m}", self.name));
        for (k, v) in [("summer", self.context.summer), ("with_family", self.context.with_family)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(err(format!("context `{k}` = {v} must be a share in [0, 1]")));
            }
        }
        if self.regions.is_empty() {
            return Err(err("no destination regions".into()));
        }
        let mut ids = BTreeSet::new();
        for r in &self.regions {
            r.region.validate().map_err(|e| err(e.to_string()))?;
            if !ids.insert(r.region.id) {
                return Err(err(format!("duplicate region id {}", r.region.id)));
            }
            for m in &r.available_modes {
                if !self.level_of_service.contains_key(&(r.region.id, *m)) {
                    return Err(err(format!("mode {m} is available at region {} but has no level of service", r.region.id)));
                }
            }
        }
        for ((region, mode), los) in &self.level_of_service {
            if !ids.contains(region) {
                return Err(err(format!("level of service for unknown region {region}")));
            }
            los.validate().map_err(|m| err(format!("region {region}, {mode}: {m}")))?;
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut los = BTreeMap::new();
        for e in file.level_of_service {
            if los.insert((e.region, e.mode), e.los).is_some() {
                return Err(Error::Validation(format!("duplicate level of service for region {}, {}", e.region, e.mode)));
            }
        }
        let regions = file
            .regions
            .into_iter()
            .map(|r| ScenarioRegion {
                region: Region {
                    id: r.id,
                    name: r.name,
                    gdp: r.gdp,
                    tourist_count: r.tourist_count,
                    attraction_score: r.attraction_score,
                    distance_km: r.distance_km,
                },
                available_modes: r.available_modes.into_iter().collect(),
            })
            .collect();
        Scenario::new(file.name, file.context, regions, los)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse(m) | Error::Validation(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        let file = ScenarioFile {
            name: self.name.clone(),
            context: self.context,
            regions: self
                .regions
                .iter()
                .map(|r| RegionEntry {
                    id: r.region.id,
                    name: r.region.name.clone(),
                    gdp: r.region.gdp,
                    tourist_count: r.region.tourist_count,
                    attraction_score: r.region.attraction_score,
                    distance_km: r.region.distance_km,
                    available_modes: r.available_modes.iter().copied().collect(),
                })
                .collect(),
            level_of_service: self
                .level_of_service
                .iter()
                .map(|((region, mode), los)| LosEntry {
                    region: *region,
                    mode: *mode,
                    los: *los,
                })
                .collect(),
        };
        toml::to_string(&file).expect("scenario serialises")
    }

    pub fn region_table(&self) -> RegionTable {
        RegionTable::new(self.regions.iter().map(|r| r.region.clone())).expect("validated scenario regions")
    }

    pub fn region_ids(&self) -> BTreeSet<RegionId> {
        self.regions.iter().map(|r| r.region.id).collect()
    }

    pub fn los(&self, region: RegionId, mode: Mode) -> Option<&LevelOfService> {
        self.level_of_service.get(&(region, mode))
    }
}

/// The estimated model re-expressed for forecasting on the RP scale.
///
/// RP and generic terms carry over unchanged. SP-only mode terms survive only on
/// modes that do not exist in the RP universe (the new modes), state dependence is
/// dropped, and SP-only destination and link terms are dropped.
pub fn forecast_spec(spec: &ModelSpec) -> Result<ModelSpec> {
    let rp = &spec.choice_sets.rp_universe;
    let new_modes: BTreeSet<Mode> = Mode::ALL.iter().copied().filter(|m| !rp.contains(m)).collect();
    let mut mode_terms = Vec::new();
    for t in &spec.mode_terms {
        if t.source == AttributeSource::StateDependence {
            continue;
        }
        match t.scope {
            TermScope::Rp | TermScope::All => mode_terms.push(UtilityTerm {
                scope: TermScope::Rp,
                ..t.clone()
            }),
            TermScope::Sp => {
                let applies: BTreeSet<Mode> = match &t.applies_to {
                    AppliesTo::All => new_modes.clone(),
                    AppliesTo::Modes(ms) => ms.intersection(&new_modes).copied().collect(),
                    AppliesTo::Regions(_) => BTreeSet::new(),
                };
                if !applies.is_empty() {
                    mode_terms.push(UtilityTerm {
                        coefficient: t.coefficient.clone(),
                        source: t.source.clone(),
                        applies_to: AppliesTo::Modes(applies),
                        scope: TermScope::Rp,
                    });
                }
            }
        }
    }
    let mut b = ModelSpecBuilder::new(spec.purpose);
    b.destination_terms = spec
        .destination_terms
        .iter()
        .filter(|t| t.scope.includes(Scope::Rp))
        .map(|t| UtilityTerm {
            scope: TermScope::Rp,
            ..t.clone()
        })
        .collect();
    b.mode_terms = mode_terms;
    b.lambda_terms = spec
        .lambda_terms
        .iter()
        .filter(|t| t.scope.includes(Scope::Rp))
        .cloned()
        .map(|mut t| {
            t.scope = TermScope::Rp;
            t
        })
        .collect();
    b.sp_structure = Some(spec.sp_structure);
    b.base_mode = spec.base_mode;
    b.choice_sets = spec.choice_sets.clone();
    b.build()
}

/// A purpose's choice model and trip-generation fit, ready for scenario evaluation.
#[derive(Clone, Debug)]
pub struct ForecastModel {
    pub purpose: Purpose,
    pub spec: ModelSpec,
    pub params: ParameterVector,
    pub tripgen: RegressionFit,
    universe: BTreeSet<Mode>,
}

impl ForecastModel {
    pub fn new(estimated_spec: &ModelSpec, estimates: &NamedParams, tripgen: RegressionFit) -> Result<Self> {
        let spec = forecast_spec(estimated_spec)?;
        let mut values = Vec::with_capacity(spec.num_free());
        for name in spec.layout().names() {
            values.push(
                *estimates
                    .get(name)
                    .ok_or_else(|| Error::Validation(format!("model lacks an estimate for `{name}`")))?,
            );
        }
        let params = ParameterVector::from_values(spec.layout(), values)?;
        let universe = estimated_spec
            .choice_sets
            .rp_universe
            .union(&estimated_spec.choice_sets.sp_universe)
            .copied()
            .collect();
        Ok(Self {
            purpose: estimated_spec.purpose,
            spec,
            params,
            tripgen,
            universe,
        })
    }

    /// The person's choice tree in the scenario. Destinations whose choice set is empty are skipped.
    pub fn observation(&self, person: &Person, scenario: &Scenario) -> Result<ChoiceObservation> {
        let mut trip = Attributes::new();
        trip.insert("summer".into(), scenario.context.summer);
        trip.insert("with_family".into(), scenario.context.with_family);
        let covariates = build_covariates(person, &trip, &self.spec, Scope::Rp)?;
        let mut nests = Vec::new();
        for r in &scenario.regions {
            let candidates: BTreeSet<Mode> = r.available_modes.intersection(&self.universe).copied().collect();
            if candidates.is_empty() {
                continue;
            }
            let Ok(set) = build_choice_set(r.region.distance_km, &candidates, Scope::Sp, &self.spec.choice_sets) else {
                continue;
            };
            let alternatives = set
                .iter()
                .map(|m| {
                    let mut attributes = scenario.los(r.region.id, *m).expect("validated scenario").attributes();
                    attributes.insert(STATE_DEPENDENCE_KEY.into(), 0.0);
                    ModeAlternative { mode: *m, attributes }
                })
                .collect();
            nests.push(DestinationNest {
                region: r.region.id,
                distance_km: r.region.distance_km,
                attributes: r.region.attributes().iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                alternatives,
            });
        }
        if nests.is_empty() {
            return Err(Error::Validation(format!(
                "scenario `{}` leaves person `{}` with an empty destination set",
                scenario.name, person.id
            )));
        }
        Ok(ChoiceObservation {
            id: format!("{}:{}", scenario.name, person.id),
            person_id: person.id.clone(),
            scope: Scope::Rp,
            purpose: self.purpose,
            covariates,
            rp_chosen_mode: None,
            nests,
            chosen_nest: 0,
            chosen_alt: 0,
        })
    }
}

/// (1/μ₃) ln Σ_D exp(μ₃ V_D).
pub fn accessibility_from_utilities(destination_utilities: &[f64], mu3: f64) -> Result<f64> {
    if destination_utilities.is_empty() {
        return Err(Error::Validation("accessibility over an empty destination set".into()));
    }
    if !(mu3 > 0.0 && mu3.is_finite()) {
        return Err(Error::Validation(format!("μ₃ must be positive, got {mu3}")));
    }
    let scaled: Vec<f64> = destination_utilities.iter().map(|v| mu3 * v).collect();
    Ok(log_sum_exp(&scaled) / mu3)
}

/// Expected maximum destination utility of a person in the scenario.
pub fn accessibility(person: &Person, scenario: &Scenario, model: &ForecastModel, mu3: f64) -> Result<f64> {
    let obs = model.observation(person, scenario)?;
    let eval = compile_observation(&obs, &model.spec)?.evaluate(&model.params.values);
    accessibility_from_utilities(&eval.destination_utilities, mu3)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccessibilityRow {
    pub person_id: String,
    pub purpose: Purpose,
    pub accessibility: f64,
}

pub const ACCESSIBILITY_COLUMNS: &[&str] = &["person_id", "purpose", "accessibility"];

/// Accessibility of every person under every model, purpose-major.
pub fn accessibility_table(
    population: &[Person],
    scenario: &Scenario,
    models: &[ForecastModel],
    mu3: f64,
) -> Result<Vec<AccessibilityRow>> {
    let mut rows = Vec::with_capacity(population.len() * models.len());
    for m in models {
        let values: Vec<f64> = population
            .par_iter()
            .map(|p| accessibility(p, scenario, m, mu3))
            .collect::<Result<_>>()?;
        rows.extend(population.iter().zip(values).map(|(p, a)| AccessibilityRow {
            person_id: p.id.clone(),
            purpose: m.purpose,
            accessibility: a,
        }));
    }
    Ok(rows)
}

pub fn write_accessibility(rows: &[AccessibilityRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::load(path, None, e.to_string()))?;
    let io = |e: csv::Error| Error::load(path, None, e.to_string());
    w.write_record(ACCESSIBILITY_COLUMNS).map_err(io)?;
    for r in rows {
        w.write_record([r.person_id.clone(), r.purpose.to_string(), r.accessibility.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonDemand {
    pub person_id: String,
    pub purpose: Purpose,
    pub accessibility: f64,
    pub generated: f64,
    /// A negative linear trip prediction was raised to zero.
    pub floored: bool,
    /// (region, mode, expected trips).
    pub cells: Vec<(RegionId, Mode, f64)>,
}

impl PersonDemand {
    pub fn by_mode(&self) -> BTreeMap<Mode, f64> {
        let mut out = BTreeMap::new();
        for (_, m, t) in &self.cells {
            *out.entry(*m).or_insert(0.0) += t;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DemandCell {
    pub trips: f64,
    /// Trips × distance, in km.
    pub vmt: f64,
}

/// Expected annual trips per (purpose, destination, mode).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandTable {
    pub scenario: String,
    pub regions: BTreeSet<RegionId>,
    pub cells: BTreeMap<(Purpose, RegionId, Mode), DemandCell>,
    pub generated: BTreeMap<Purpose, f64>,
    pub persons: Vec<PersonDemand>,
}

impl DemandTable {
    pub fn total_trips(&self) -> f64 {
        self.cells.values().map(|c| c.trips).sum()
    }

    pub fn total_vmt(&self) -> f64 {
        self.cells.values().map(|c| c.vmt).sum()
    }

    pub fn by_mode(&self) -> BTreeMap<Mode, DemandCell> {
        let mut out: BTreeMap<Mode, DemandCell> = BTreeMap::new();
        for ((_, _, m), c) in &self.cells {
            let e = out.entry(*m).or_default();
            e.trips += c.trips;
            e.vmt += c.vmt;
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::load(path, None, e.to_string()))?;
        let io = |e: csv::Error| Error::load(path, None, e.to_string());
        w.write_record(DEMAND_COLUMNS).map_err(io)?;
        for ((purpose, region, mode), c) in &self.cells {
            w.write_record([
                purpose.to_string(),
                region.to_string(),
                mode.to_string(),
                c.trips.to_string(),
                c.vmt.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub const DEMAND_COLUMNS: &[&str] = &["purpose", "region_id", "mode", "trips", "vmt"];

pub const DEFAULT_MU3: f64 = 1.0;

/// Per-person demand for one purpose.
pub fn person_demand(person: &Person, scenario: &Scenario, model: &ForecastModel, mu3: f64) -> Result<PersonDemand> {
    let obs = model.observation(person, scenario)?;
    let eval = compile_observation(&obs, &model.spec)?.evaluate(&model.params.values);
    let acc = accessibility_from_utilities(&eval.destination_utilities, mu3)?;
    let mut cov = person.attributes();
    cov.insert("accessibility".into(), acc);
    let pred = predict_trips(&model.tripgen, &cov).map_err(|e| {
        Error::Validation(format!("person `{}` does not fit the {} trip-generation schema: {e}", person.id, model.purpose))
    })?;
    let mut cells = Vec::with_capacity(obs.num_leaves());
    for (d, nest) in obs.nests.iter().enumerate() {
        for (a, alt) in nest.alternatives.iter().enumerate() {
            cells.push((nest.region, alt.mode, pred.trips * eval.joint(d, a)));
        }
    }
    Ok(PersonDemand {
        person_id: person.id.clone(),
        purpose: model.purpose,
        accessibility: acc,
        generated: pred.trips,
        floored: pred.floored,
        cells,
    })
}

/// Runs every person through every purpose model and aggregates expected trips.
pub fn forecast_demand(population: &[Person], scenario: &Scenario, models: &[ForecastModel], mu3: f64) -> Result<DemandTable> {
    scenario.validate()?;
    if models.iter().map(|m| m.purpose).collect::<BTreeSet<_>>().len() != models.len() {
        return Err(Error::Validation("one model per purpose".into()));
    }
    let per_person: Vec<Vec<PersonDemand>> = population
        .par_iter()
        .map(|p| models.iter().map(|m| person_demand(p, scenario, m, mu3)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let distance: BTreeMap<RegionId, f64> = scenario.regions.iter().map(|r| (r.region.id, r.region.distance_km)).collect();
    let mut cells: BTreeMap<(Purpose, RegionId, Mode), DemandCell> = BTreeMap::new();
    let mut generated: BTreeMap<Purpose, f64> = models.iter().map(|m| (m.purpose, 0.0)).collect();
    let mut persons = Vec::new();
    for pd in per_person.into_iter().flatten() {
        *generated.get_mut(&pd.purpose).expect("purpose registered") += pd.generated;
        for (region, mode, trips) in &pd.cells {
            let c = cells.entry((pd.purpose, *region, *mode)).or_default();
            c.trips += trips;
            c.vmt += trips * distance[region];
        }
        persons.push(pd);
    }
    Ok(DemandTable {
        scenario: scenario.name.clone(),
        regions: scenario.region_ids(),
        cells,
        generated,
        persons,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub base: f64,
    pub alternative: f64,
    pub absolute: f64,
    /// `None` when the base is zero.
    pub percent: Option<f64>,
}

impl Delta {
    fn new(base: f64, alternative: f64) -> Self {
        let absolute = alternative - base;
        Self {
            base,
            alternative,
            absolute,
            percent: (base != 0.0).then(|| 100.0 * absolute / base),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeDelta {
    pub mode: Mode,
    pub trips: Delta,
    pub vmt: Delta,
}

/// Trip reallocation per person, summed over persons and purposes.
///
/// For a person with per-mode losses l and gains g (L = Σl, G = Σg), the shared
/// volume min(L, G) moves from m to m′ in proportion l_m g_m′; the rest of the
/// gains are induced trips and the rest of the losses are suppressed trips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeShift {
    pub modes: Vec<Mode>,
    /// flows[i][j]: trips moving from modes[i] to modes[j].
    pub flows: Vec<Vec<f64>>,
    pub induced: Vec<f64>,
    pub suppressed: Vec<f64>,
    pub unchanged: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducedReport {
    pub base_scenario: String,
    pub alternative_scenario: String,
    pub trips: Delta,
    pub vmt: Delta,
    pub modes: Vec<ModeDelta>,
    /// Induced trips as a percentage of base trips.
    pub induced_percent: Option<f64>,
    pub mode_shift: ModeShift,
}

/// Per-person allocation of base → alternative mode totals.
pub fn person_mode_shift(base: &BTreeMap<Mode, f64>, alt: &BTreeMap<Mode, f64>, modes: &[Mode], shift: &mut ModeShift) {
    let get = |m: &BTreeMap<Mode, f64>, k: Mode| m.get(&k).copied().unwrap_or(0.0);
    let loss: Vec<f64> = modes.iter().map(|m| (get(base, *m) - get(alt, *m)).max(0.0)).collect();
    let gain: Vec<f64> = modes.iter().map(|m| (get(alt, *m) - get(base, *m)).max(0.0)).collect();
    let l: f64 = loss.iter().sum();
    let g: f64 = gain.iter().sum();
    for (i, m) in modes.iter().enumerate() {
        shift.unchanged[i] += get(base, *m).min(get(alt, *m));
    }
    if l > 0.0 && g > 0.0 {
        let moved = l.min(g) / (l * g);
        for i in 0..modes.len() {
            for j in 0..modes.len() {
                shift.flows[i][j] += loss[i] * gain[j] * moved;
            }
        }
    }
    if g > l {
        let share = if g > 0.0 { 1.0 - l / g } else { 0.0 };
        for j in 0..modes.len() {
            shift.induced[j] += gain[j] * share;
        }
    } else if l > g {
        let share = if l > 0.0 { 1.0 - g / l } else { 0.0 };
        for i in 0..modes.len() {
            shift.suppressed[i] += loss[i] * share;
        }
    }
}

/// Differences two demand tables over the same population and destinations.
pub fn induced_travel(base: &DemandTable, alt: &DemandTable) -> Result<InducedReport> {
    if base.regions != alt.regions {
        return Err(Error::Validation(format!(
            "region sets differ between `{}` and `{}`",
            base.scenario, alt.scenario
        )));
    }
    let key = |t: &DemandTable| t.persons.iter().map(|p| (p.person_id.clone(), p.purpose)).collect::<Vec<_>>();
    if key(base) != key(alt) {
        return Err(Error::Validation("tables cover different populations".into()));
    }
    let bm = base.by_mode();
    let am = alt.by_mode();
    let modes: Vec<Mode> = bm.keys().chain(am.keys()).copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mode_rows = modes
        .iter()
        .map(|m| {
            let b = bm.get(m).copied().unwrap_or_default();
            let a = am.get(m).copied().unwrap_or_default();
            ModeDelta {
                mode: *m,
                trips: Delta::new(b.trips, a.trips),
                vmt: Delta::new(b.vmt, a.vmt),
            }
        })
        .collect();
    let k = modes.len();
    let mut shift = ModeShift {
        modes: modes.clone(),
        flows: vec![vec![0.0; k]; k],
        induced: vec![0.0; k],
        suppressed: vec![0.0; k],
        unchanged: vec![0.0; k],
    };
    for (pb, pa) in base.persons.iter().zip(&alt.persons) {
        person_mode_shift(&pb.by_mode(), &pa.by_mode(), &modes, &mut shift);
    }
    let base_trips = base.total_trips();
    let induced_total: f64 = shift.induced.iter().sum();
    Ok(InducedReport {
        base_scenario: base.scenario.clone(),
        alternative_scenario: alt.scenario.clone(),
        trips: Delta::new(base_trips, alt.total_trips()),
        vmt: Delta::new(base.total_vmt(), alt.total_vmt()),
        modes: mode_rows,
        induced_percent: (base_trips != 0.0).then(|| 100.0 * induced_total / base_trips),
        mode_shift: shift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accessibility_values() {
        assert_eq!(accessibility_from_utilities(&[2.0], 1.0).unwrap(), 2.0);
        let a = accessibility_from_utilities(&[1.0, 1.0], 1.0).unwrap();
        assert!((a - (1.0 + 2f64.ln())).abs() < 1e-15);
        assert!((a - 1.6931).abs() < 1e-4);
        assert!(accessibility_from_utilities(&[], 1.0).is_err());
        assert!(accessibility_from_utilities(&[1.0], 0.0).is_err());
        let big = accessibility_from_utilities(&[0.3, 1.7, -2.0], 1e8).unwrap();
        assert!((big - 1.7).abs() < 1e-6);
    }

    #[test]
    fn shift_allocation_conserves_volume() {
        let modes = [Mode::Bus, Mode::Car, Mode::Hsr];
        let base: BTreeMap<Mode, f64> = [(Mode::Bus, 2.0), (Mode::Car, 1.0)].into_iter().collect();
        let alt: BTreeMap<Mode, f64> = [(Mode::Bus, 1.0), (Mode::Car, 0.5), (Mode::Hsr, 2.5)].into_iter().collect();
        let mut s = ModeShift {
            modes: modes.to_vec(),
            flows: vec![vec![0.0; 3]; 3],
            induced: vec![0.0; 3],
            suppressed: vec![0.0; 3],
            unchanged: vec![0.0; 3],
        };
        person_mode_shift(&base, &alt, &modes, &mut s);
        assert!((s.flows[0][2] - 1.0).abs() < 1e-15 && (s.flows[1][2] - 0.5).abs() < 1e-15);
        assert!((s.induced[2] - 1.0).abs() < 1e-15);
        assert_eq!(s.suppressed, vec![0.0; 3]);
    }
}
