//! TOML model-spec documents. Grammar is documented in `docs/FORMATS.md`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Deserialize;

use super::{
    AppliesTo, AttributeSource, ChoiceSetRules, LambdaTerm, Mode, ModelSpec, ModelSpecBuilder, Purpose, RegionId,
    SpStructure, TermScope, UtilityTerm, VotDefinition,
};
use crate::error::{Error, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    purpose: String,
    sp_structure: Option<String>,
    base_mode: String,
    #[serde(default)]
    destination_terms: Vec<RawTerm>,
    #[serde(default)]
    mode_terms: Vec<RawTerm>,
    #[serde(default)]
    lambda: Vec<RawLambda>,
    #[serde(default)]
    normalization: RawNormalization,
    #[serde(default)]
    choice_set_rules: RawRules,
    #[serde(default)]
    vot: Vec<RawVot>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTerm {
    coefficient: String,
    source: String,
    attribute: Option<String>,
    person_attribute: Option<String>,
    modes: Option<Vec<String>>,
    regions: Option<Vec<RegionId>>,
    scope: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLambda {
    coefficient: String,
    covariate: String,
    scope: String,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawNormalization {
    scale: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawRules {
    short_distance_km: Option<f64>,
    long_distance_km: Option<f64>,
    rp_universe: Option<Vec<String>>,
    sp_universe: Option<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVot {
    label: String,
    time: String,
    cost: String,
}

fn parse_scope(s: &str) -> Result<TermScope> {
    match s.to_ascii_uppercase().as_str() {
        "RP" => Ok(TermScope::Rp),
        "SP" => Ok(TermScope::Sp),
        "ALL" => Ok(TermScope::All),
        _ => Err(Error::Parse(format!("unknown scope `{s}` (expected RP, SP or All)"))),
    }
}

fn parse_modes(list: &[String]) -> Result<BTreeSet<Mode>> {
    list.iter().map(|m| m.parse()).collect()
}

fn convert_term(raw: RawTerm) -> Result<UtilityTerm> {
    let need_attr = |what: &str| {
        raw.attribute
            .clone()
            .ok_or_else(|| Error::Parse(format!("term `{}`: source `{what}` needs `attribute`", raw.coefficient)))
    };
    let source = match raw.source.as_str() {
        "alternative" => AttributeSource::Alternative(need_attr("alternative")?),
        "person" => AttributeSource::Person(need_attr("person")?),
        "interaction" => AttributeSource::Interaction {
            alternative: need_attr("interaction")?,
            person: raw.person_attribute.clone().ok_or_else(|| {
                Error::Parse(format!("term `{}`: interaction needs `person_attribute`", raw.coefficient))
            })?,
        },
        "constant" => AttributeSource::Constant,
        "state_dependence" => AttributeSource::StateDependence,
        other => {
            return Err(Error::Parse(format!(
                "term `{}`: unknown source `{other}`",
                raw.coefficient
            )))
        }
    };
    let applies_to = match (&raw.modes, &raw.regions) {
        (Some(_), Some(_)) => {
            return Err(Error::Parse(format!(
                "term `{}`: give `modes` or `regions`, not both",
                raw.coefficient
            )))
        }
        (Some(m), None) => AppliesTo::Modes(parse_modes(m)?),
        (None, Some(r)) => AppliesTo::Regions(r.iter().copied().collect()),
        (None, None) => AppliesTo::All,
    };
    Ok(UtilityTerm {
        coefficient: raw.coefficient,
        source,
        applies_to,
        scope: parse_scope(&raw.scope)?,
    })
}

pub(super) fn parse(text: &str) -> Result<ModelSpec> {
    let raw: RawSpec = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let mut b = ModelSpecBuilder::new(raw.purpose.parse::<Purpose>()?);
    b.base_mode = raw.base_mode.parse()?;
    b.sp_structure = match raw.sp_structure.as_deref() {
        None => None,
        Some("mode_only_mnl") => Some(SpStructure::ModeOnlyMnl),
        Some("nested_destination_mode") => Some(SpStructure::NestedDestinationMode),
        Some(other) => return Err(Error::Parse(format!("unknown sp_structure `{other}`"))),
    };
    b.destination_terms = raw.destination_terms.into_iter().map(convert_term).collect::<Result<_>>()?;
    b.mode_terms = raw.mode_terms.into_iter().map(convert_term).collect::<Result<_>>()?;
    b.lambda_terms = raw
        .lambda
        .into_iter()
        .map(|l| {
            let factors = if l.covariate.trim() == "constant" {
                Vec::new()
            } else {
                l.covariate.split('*').map(|f| f.trim().to_string()).collect()
            };
            Ok(LambdaTerm {
                coefficient: l.coefficient,
                factors,
                scope: parse_scope(&l.scope)?,
            })
        })
        .collect::<Result<_>>()?;
    b.scale = raw.normalization.scale;
    let defaults = ChoiceSetRules::default();
    let rules = raw.choice_set_rules;
    b.choice_sets = ChoiceSetRules {
        short_distance_km: rules.short_distance_km.unwrap_or(defaults.short_distance_km),
        long_distance_km: rules.long_distance_km.unwrap_or(defaults.long_distance_km),
        rp_universe: match rules.rp_universe {
            Some(u) => parse_modes(&u)?,
            None => defaults.rp_universe,
        },
        sp_universe: match rules.sp_universe {
            Some(u) => parse_modes(&u)?,
            None => defaults.sp_universe,
        },
    };
    if b.choice_sets.rp_universe.contains(&Mode::Hsr) {
        return Err(Error::Config("HSR cannot be part of the RP universe".into()));
    }
    b.vot = raw
        .vot
        .into_iter()
        .map(|v| VotDefinition {
            label: v.label,
            time_coefficient: v.time,
            cost_coefficient: v.cost,
        })
        .collect();
    b.build()
}

fn scope_str(s: TermScope) -> &'static str {
    match s {
        TermScope::Rp => "RP",
        TermScope::Sp => "SP",
        TermScope::All => "All",
    }
}

fn mode_list(set: &BTreeSet<Mode>) -> String {
    let items: Vec<String> = set.iter().map(|m| format!("\"{m}\"")).collect();
    format!("[{}]", items.join(", "))
}

fn render_term(out: &mut String, table: &str, t: &UtilityTerm) {
    let _ = writeln!(out, "\n[[{table}]]");
    let _ = writeln!(out, "coefficient = \"{}\"", t.coefficient);
    match &t.source {
        AttributeSource::Alternative(a) => {
            let _ = writeln!(out, "source = \"alternative\"\nattribute = \"{a}\"");
        }
        AttributeSource::Person(a) => {
            let _ = writeln!(out, "source = \"person\"\nattribute = \"{a}\"");
        }
        AttributeSource::Interaction { person, alternative } => {
            let _ = writeln!(
                out,
                "source = \"interaction\"\nattribute = \"{alternative}\"\nperson_attribute = \"{person}\""
            );
        }
        AttributeSource::Constant => {
            let _ = writeln!(out, "source = \"constant\"");
        }
        AttributeSource::StateDependence => {
            let _ = writeln!(out, "source = \"state_dependence\"");
        }
    }
    match &t.applies_to {
        AppliesTo::All => {}
        AppliesTo::Modes(m) => {
            let _ = writeln!(out, "modes = {}", mode_list(m));
        }
        AppliesTo::Regions(r) => {
            let items: Vec<String> = r.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(out, "regions = [{}]", items.join(", "));
        }
    }
    let _ = writeln!(out, "scope = \"{}\"", scope_str(t.scope));
}

/// Canonical rendering; `parse(render(s)) == s`.
pub(super) fn render(spec: &ModelSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "purpose = \"{}\"", spec.purpose);
    let _ = writeln!(
        out,
        "sp_structure = \"{}\"",
        match spec.sp_structure {
            SpStructure::ModeOnlyMnl => "mode_only_mnl",
            SpStructure::NestedDestinationMode => "nested_destination_mode",
        }
    );
    let _ = writeln!(out, "base_mode = \"{}\"", spec.base_mode);
    for t in &spec.destination_terms {
        render_term(&mut out, "destination_terms", t);
    }
    for t in &spec.mode_terms {
        render_term(&mut out, "mode_terms", t);
    }
    for l in &spec.lambda_terms {
        let _ = writeln!(
            out,
            "\n[[lambda]]\ncoefficient = \"{}\"\ncovariate = \"{}\"\nscope = \"{}\"",
            l.coefficient,
            l.covariate_key(),
            scope_str(l.scope)
        );
    }
    if let Some(scale) = &spec.scale {
        let _ = writeln!(out, "\n[normalization]\nscale = \"{scale}\"");
    }
    let r = &spec.choice_sets;
    let _ = writeln!(
        out,
        "\n[choice_set_rules]\nshort_distance_km = {:?}\nlong_distance_km = {:?}\nrp_universe = {}\nsp_universe = {}",
        r.short_distance_km,
        r.long_distance_km,
        mode_list(&r.rp_universe),
        mode_list(&r.sp_universe)
    );
    for v in &spec.vot {
        let _ = writeln!(
            out,
            "\n[[vot]]\nlabel = \"{}\"\ntime = \"{}\"\ncost = \"{}\"",
            v.label, v.time_coefficient, v.cost_coefficient
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        for spec in [ModelSpec::business_reference(), ModelSpec::non_business_reference()] {
            let text = spec.to_toml_string();
            assert_eq!(ModelSpec::from_toml_str(&text).unwrap(), spec);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "purpose = \"business\"\nbase_mode = \"LCC\"\ncolour = 1\n";
        assert!(ModelSpec::from_toml_str(text).is_err());
    }

    #[test]
    fn hsr_in_rp_universe_is_rejected() {
        let text = "purpose = \"business\"\nbase_mode = \"LCC\"\n[choice_set_rules]\nrp_universe = [\"HSR\", \"Bus\"]\n";
        assert!(matches!(ModelSpec::from_toml_str(text), Err(Error::Config(_))));
    }
}
