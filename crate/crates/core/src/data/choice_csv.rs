//! Long-layout choice files: one row per (choice situation, destination, mode).

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use log::warn;

use super::csv_util::{Columns, CsvFile};
use super::observation::{
    build_covariates, trip_context, Attributes, ChoiceDataset, ChoiceObservation, DestinationNest, ModeAlternative,
    STATE_DEPENDENCE_KEY,
};
use super::person::PersonTable;
use super::region::RegionTable;
use crate::engine::compile_observation;
use crate::error::{Error, Result};
use crate::spec::{build_choice_set, Mode, ModelSpec, Purpose, RegionId, Scope};

pub const MODE_ATTRIBUTE_COLUMNS: &[&str] = &["travel_cost", "in_vehicle_time", "access_egress_time", "frequency"];

pub const RP_COLUMNS: &[&str] = &[
    "obs_id",
    "person_id",
    "purpose",
    "season",
    "travel_party",
    "region_id",
    "mode",
    "travel_cost",
    "in_vehicle_time",
    "access_egress_time",
    "frequency",
    "chosen",
];

pub const SP_COLUMNS: &[&str] = &[
    "scenario_id",
    "person_id",
    "purpose",
    "season",
    "travel_party",
    "region_id",
    "attraction_eval",
    "mode",
    "travel_cost",
    "in_vehicle_time",
    "access_egress_time",
    "frequency",
    "rp_chosen_mode",
    "chosen",
];

struct RawRow {
    line: usize,
    region: RegionId,
    mode: Mode,
    attributes: Attributes,
    attraction_eval: Option<f64>,
    chosen: bool,
}

struct RawObservation {
    id: String,
    first_line: usize,
    person_id: String,
    summer: Option<bool>,
    with_family: Option<bool>,
    rp_chosen_mode: Option<Mode>,
    rows: Vec<RawRow>,
}

fn parse_choice(text: &str, options: [&str; 2], column: &str) -> std::result::Result<Option<bool>, String> {
    if text.is_empty() {
        return Ok(None);
    }
    if text == options[0] {
        Ok(Some(true))
    } else if text == options[1] {
        Ok(Some(false))
    } else {
        Err(format!("column `{column}`: expected `{}` or `{}`, got `{text}`", options[0], options[1]))
    }
}

/// Loads the RP trip diary for the spec's purpose. Rows of other purposes are skipped.
pub fn load_rp_dataset(path: &Path, persons: &PersonTable, regions: &RegionTable, spec: &ModelSpec) -> Result<ChoiceDataset> {
    load_choice_dataset(path, Scope::Rp, persons, regions, spec)
}

/// Loads SP scenario answers for the spec's purpose.
pub fn load_sp_dataset(path: &Path, persons: &PersonTable, regions: &RegionTable, spec: &ModelSpec) -> Result<ChoiceDataset> {
    load_choice_dataset(path, Scope::Sp, persons, regions, spec)
}

fn load_choice_dataset(
    path: &Path,
    scope: Scope,
    persons: &PersonTable,
    regions: &RegionTable,
    spec: &ModelSpec,
) -> Result<ChoiceDataset> {
    let mut file = CsvFile::open(path)?;
    let key = match scope {
        Scope::Rp => "obs_id",
        Scope::Sp => "scenario_id",
    };
    let mut required: Vec<&'static str> = vec![key, "person_id", "purpose", "region_id", "mode", "chosen"];
    let mut optional: Vec<&'static str> = vec!["season", "travel_party"];
    optional.extend_from_slice(MODE_ATTRIBUTE_COLUMNS);
    if scope == Scope::Sp {
        optional.push("attraction_eval");
        if spec.has_state_dependence() {
            required.push("rp_chosen_mode");
        } else {
            optional.push("rp_chosen_mode");
        }
    }
    for attr in spec.required_mode_attributes() {
        if let Some(col) = MODE_ATTRIBUTE_COLUMNS.iter().find(|c| **c == attr) {
            if !file.has_column(col) && spec_needs_in_scope(spec, &attr, scope) {
                required.push(col);
            }
        }
    }
    let cols = Columns::resolve(&file, &required, &optional)?;

    let mut order: Vec<RawObservation> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    while let Some(rec) = file.next_record()? {
        let purpose: Purpose = rec.parse(&cols, "purpose")?;
        if purpose != spec.purpose {
            continue;
        }
        let id = rec.text(&cols, key)?.to_string();
        if id.is_empty() {
            return Err(rec.error(format!("empty `{key}`")));
        }
        let person_id = rec.text(&cols, "person_id")?.to_string();
        let summer = parse_choice(rec.text(&cols, "season")?, ["summer", "other"], "season").map_err(|m| rec.error(m))?;
        let with_family = parse_choice(rec.text(&cols, "travel_party")?, ["with_family", "other"], "travel_party")
            .map_err(|m| rec.error(m))?;
        let rp_chosen_mode = match rec.text(&cols, "rp_chosen_mode")? {
            "" => None,
            t => Some(t.parse::<Mode>().map_err(|e| rec.error(format!("column `rp_chosen_mode`: {e}")))?),
        };
        let region: RegionId = rec.parse(&cols, "region_id")?;
        if regions.get(region).is_none() {
            return Err(rec.error(format!("unknown region id {region}")));
        }
        let mode: Mode = rec.parse(&cols, "mode")?;
        let mut attributes = Attributes::new();
        for col in MODE_ATTRIBUTE_COLUMNS {
            if let Some(v) = rec.opt_number(&cols, col)? {
                if v < 0.0 {
                    return Err(rec.error(format!("column `{col}`: value {v} must be >= 0")));
                }
                attributes.insert((*col).to_string(), v);
            }
        }
        let attraction_eval = rec.opt_number(&cols, "attraction_eval")?;
        let chosen = rec.flag(&cols, "chosen")?;
        let line = rec.line;

        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push(RawObservation {
                id: id.clone(),
                first_line: line,
                person_id: person_id.clone(),
                summer,
                with_family,
                rp_chosen_mode,
                rows: Vec::new(),
            });
            order.len() - 1
        });
        let obs = &mut order[slot];
        if obs.person_id != person_id || obs.summer != summer || obs.with_family != with_family {
            return Err(rec.error(format!("`{key}` {id}: person and trip fields differ between rows")));
        }
        if obs.rp_chosen_mode != rp_chosen_mode {
            return Err(rec.error(format!("`{key}` {id}: rp_chosen_mode differs between rows")));
        }
        obs.rows.push(RawRow {
            line,
            region,
            mode,
            attributes,
            attraction_eval,
            chosen,
        });
    }

    let mut dataset = ChoiceDataset::empty(scope, spec.purpose);
    if order.is_empty() {
        let msg = format!("{}: no {} observations for purpose {}", path.display(), scope, spec.purpose);
        warn!("{msg}");
        dataset.warnings.push(msg);
        return Ok(dataset);
    }
    let mut dropped_rows = 0usize;
    for raw in order {
        let (obs, dropped) = assemble(raw, scope, persons, regions, spec).map_err(|e| match e {
            Error::Data(m) => Error::load(path, None, m),
            other => other,
        })?;
        dropped_rows += dropped;
        compile_observation(&obs, spec).map_err(|e| Error::load(path, None, format!("observation `{}`: {e}", obs.id)))?;
        dataset.observations.push(obs);
    }
    if dropped_rows > 0 {
        let msg = format!("{}: {dropped_rows} row(s) outside the generated choice sets were dropped", path.display());
        warn!("{msg}");
        dataset.warnings.push(msg);
    }
    Ok(dataset)
}

fn spec_needs_in_scope(spec: &ModelSpec, attribute: &str, scope: Scope) -> bool {
    use crate::spec::AttributeSource;
    spec.mode_terms.iter().any(|t| {
        t.scope.includes(scope)
            && matches!(&t.source, AttributeSource::Alternative(a) | AttributeSource::Interaction { alternative: a, .. } if a == attribute)
    })
}

fn assemble(
    raw: RawObservation,
    scope: Scope,
    persons: &PersonTable,
    regions: &RegionTable,
    spec: &ModelSpec,
) -> Result<(ChoiceObservation, usize)> {
    let what = match scope {
        Scope::Rp => "observation",
        Scope::Sp => "scenario",
    };
    let id = raw.id.clone();
    let person = persons
        .get(&raw.person_id)
        .ok_or_else(|| Error::Data(format!("{what} `{id}` (line {}): unknown person `{}`", raw.first_line, raw.person_id)))?;
    let chosen_count = raw.rows.iter().filter(|r| r.chosen).count();
    if chosen_count != 1 {
        return Err(Error::Data(format!("{what} `{id}`: exactly one row must be chosen, found {chosen_count}")));
    }
    if scope == Scope::Sp && spec.has_state_dependence() && raw.rp_chosen_mode.is_none() {
        return Err(Error::Data(format!("scenario `{id}`: rp_chosen_mode is required by state-dependence terms")));
    }

    let mut region_order: Vec<RegionId> = Vec::new();
    for r in &raw.rows {
        if !region_order.contains(&r.region) {
            region_order.push(r.region);
        }
    }
    if scope == Scope::Sp && !spec.is_nested(Scope::Sp) && region_order.len() != 1 {
        return Err(Error::Data(format!(
            "scenario `{id}`: mode-only SP choices need exactly one destination, found {}",
            region_order.len()
        )));
    }

    let universe = spec.universe(scope);
    let mut nests = Vec::new();
    let mut chosen = None;
    let mut dropped = 0usize;
    for region_id in region_order {
        let region = regions.get(region_id).expect("checked on read");
        let rows: Vec<&RawRow> = raw.rows.iter().filter(|r| r.region == region_id).collect();
        let holds_choice = rows.iter().any(|r| r.chosen);
        let mut present = BTreeSet::new();
        for r in &rows {
            if !present.insert(r.mode) {
                return Err(Error::Data(format!(
                    "{what} `{id}` (line {}): duplicate row for region {region_id}, mode {}",
                    r.line, r.mode
                )));
            }
        }
        let candidates: BTreeSet<Mode> = match scope {
            Scope::Rp => present.intersection(universe).copied().collect(),
            Scope::Sp => universe.clone(),
        };
        let choice_set = if candidates.is_empty() {
            Err(Error::Config("no modes from the universe are present".into()))
        } else {
            build_choice_set(region.distance_km, &candidates, scope, &spec.choice_sets)
        };
        let choice_set = match choice_set {
            Ok(set) => set,
            Err(e) if holds_choice => {
                return Err(Error::Data(format!(
                    "{what} `{id}`: chosen destination {region_id} has no valid choice set: {e}"
                )))
            }
            Err(_) => {
                dropped += rows.len();
                continue;
            }
        };
        if scope == Scope::Sp {
            if let Some(missing) = choice_set.iter().find(|m| !present.contains(m)) {
                return Err(Error::Data(format!(
                    "scenario `{id}`: incomplete block, region {region_id} has no row for {missing}"
                )));
            }
        }

        let mut attributes: Attributes = region.attributes().iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let evals: BTreeSet<u64> = rows.iter().filter_map(|r| r.attraction_eval.map(f64::to_bits)).collect();
        match evals.len() {
            0 => {}
            1 => {
                attributes.insert("attraction_eval".into(), f64::from_bits(*evals.iter().next().unwrap()));
            }
            _ => {
                return Err(Error::Data(format!(
                    "{what} `{id}`: attraction_eval differs between rows of region {region_id}"
                )))
            }
        }

        let mut alternatives = Vec::new();
        for r in &rows {
            if !choice_set.contains(&r.mode) {
                if r.chosen {
                    return Err(Error::Data(format!(
                        "{what} `{id}` (line {}): chosen mode not in choice set ({} at {} km)",
                        r.line, r.mode, region.distance_km
                    )));
                }
                dropped += 1;
                continue;
            }
            let mut attrs = r.attributes.clone();
            if scope == Scope::Sp {
                let sd = raw.rp_chosen_mode.map_or(0.0, |m| f64::from(u8::from(m == r.mode)));
                attrs.insert(STATE_DEPENDENCE_KEY.into(), sd);
            }
            if r.chosen {
                chosen = Some((nests.len(), alternatives.len()));
            }
            alternatives.push(ModeAlternative { mode: r.mode, attributes: attrs });
        }
        nests.push(DestinationNest {
            region: region_id,
            distance_km: region.distance_km,
            attributes,
            alternatives,
        });
    }
    let (chosen_nest, chosen_alt) = chosen.expect("one chosen row survives or an error was returned");
    let trip = trip_context(raw.summer, raw.with_family);
    let covariates = build_covariates(person, &trip, spec, scope)?;
    Ok((
        ChoiceObservation {
            id,
            person_id: raw.person_id,
            scope,
            purpose: spec.purpose,
            covariates,
            rp_chosen_mode: raw.rp_chosen_mode,
            nests,
            chosen_nest,
            chosen_alt,
        },
        dropped,
    ))
}

fn fmt_opt(v: Option<&f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_flag(v: Option<&f64>, yes: &str, no: &str) -> String {
    match v {
        Some(x) if *x != 0.0 => yes.to_string(),
        Some(_) => no.to_string(),
        None => String::new(),
    }
}

/// Writes a dataset in the long layout read by the loaders.
pub fn write_choice_dataset(dataset: &ChoiceDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::load(path, None, e.to_string()))?;
    let io = |e: csv::Error| Error::load(path, None, e.to_string());
    let header = match dataset.scope {
        Scope::Rp => RP_COLUMNS,
        Scope::Sp => SP_COLUMNS,
    };
    w.write_record(header).map_err(io)?;
    for obs in &dataset.observations {
        let season = fmt_flag(obs.covariates.get("summer"), "summer", "other");
        let party = fmt_flag(obs.covariates.get("with_family"), "with_family", "other");
        for (d, nest) in obs.nests.iter().enumerate() {
            for (a, alt) in nest.alternatives.iter().enumerate() {
                let chosen = if d == obs.chosen_nest && a == obs.chosen_alt { "1" } else { "0" };
                let attr = |k: &str| fmt_opt(alt.attributes.get(k));
                let row: Vec<String> = match dataset.scope {
                    Scope::Rp => vec![
                        obs.id.clone(),
                        obs.person_id.clone(),
                        obs.purpose.to_string(),
                        season.clone(),
                        party.clone(),
                        nest.region.to_string(),
                        alt.mode.to_string(),
                        attr("travel_cost"),
                        attr("in_vehicle_time"),
                        attr("access_egress_time"),
                        attr("frequency"),
                        chosen.into(),
                    ],
                    Scope::Sp => vec![
                        obs.id.clone(),
                        obs.person_id.clone(),
                        obs.purpose.to_string(),
                        season.clone(),
                        party.clone(),
                        nest.region.to_string(),
                        fmt_opt(nest.attributes.get("attraction_eval")),
                        alt.mode.to_string(),
                        attr("travel_cost"),
                        attr("in_vehicle_time"),
                        attr("access_egress_time"),
                        attr("frequency"),
                        obs.rp_chosen_mode.map(|m| m.to_string()).unwrap_or_default(),
                        chosen.into(),
                    ],
                };
                w.write_record(&row).map_err(io)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
