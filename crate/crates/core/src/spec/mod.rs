//! Declarative model specification: alternatives, utility terms, logsum-parameter
//! link covariates, normalisation and choice-set rules.
//!
//! One [`ModelSpec`] describes either the business shape (nested destination/mode
//! on RP data, mode-only MNL on SP data) or the non-business shape (nested on
//! both). The engine, the estimator and the forecaster all consume the same type.

mod choice_set;
mod file;
mod params;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use choice_set::{build_choice_set, ChoiceSetRules};
pub use params::{pack_parameters, unpack_parameters, Layout, NamedParams, ParamEntry, ParamKind, ParameterVector};

/// Intercity travel modes. HSR only appears in stated-preference choice sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    Bus,
    ConventionalRail,
    Airline,
    #[serde(rename = "LCC")]
    Lcc,
    Car,
    #[serde(rename = "HSR")]
    Hsr,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Bus,
        Mode::ConventionalRail,
        Mode::Airline,
        Mode::Lcc,
        Mode::Car,
        Mode::Hsr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Bus => "Bus",
            Mode::ConventionalRail => "ConventionalRail",
            Mode::Airline => "Airline",
            Mode::Lcc => "LCC",
            Mode::Car => "Car",
            Mode::Hsr => "HSR",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bus" => Ok(Mode::Bus),
            "conventionalrail" | "rail" | "conventional_rail" => Ok(Mode::ConventionalRail),
            "airline" | "airlines" | "air" => Ok(Mode::Airline),
            "lcc" => Ok(Mode::Lcc),
            "car" => Ok(Mode::Car),
            "hsr" => Ok(Mode::Hsr),
            other => Err(Error::Parse(format!("unknown mode `{other}`"))),
        }
    }
}

pub type RegionId = u32;

/// A destination region along the corridor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: RegionId,
    pub name: String,
    /// Total GDP in 10^6 Mil VND.
    pub gdp: f64,
    /// Annual tourist arrivals, millions.
    pub tourist_count: f64,
    pub attraction_score: f64,
    pub distance_km: f64,
}

impl Region {
    pub fn validate(&self) -> Result<()> {
        if !(self.gdp > 0.0) {
            return Err(Error::Validation(format!("region {}: gdp must be positive", self.id)));
        }
        if !(self.distance_km >= 0.0) {
            return Err(Error::Validation(format!(
                "region {}: distance must be non-negative",
                self.id
            )));
        }
        Ok(())
    }

    /// Destination-level attributes derived from the region table.
    pub fn attributes(&self) -> [(&'static str, f64); 6] {
        [
            ("gdp", self.gdp),
            ("log_gdp", self.gdp.ln()),
            ("tourist_count", self.tourist_count),
            ("tourists", self.tourist_count),
            ("attraction_score", self.attraction_score),
            ("distance_km", self.distance_km),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Business,
    NonBusiness,
}

impl Purpose {
    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::Business => "business",
            Purpose::NonBusiness => "non_business",
        }
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Purpose {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "business" => Ok(Purpose::Business),
            "non_business" | "nonbusiness" => Ok(Purpose::NonBusiness),
            other => Err(Error::Parse(format!("unknown purpose `{other}`"))),
        }
    }
}

/// Which data source a choice observation comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scope {
    #[serde(rename = "RP")]
    Rp,
    #[serde(rename = "SP")]
    Sp,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Rp => "RP",
            Scope::Sp => "SP",
        })
    }
}

/// Which data sources a utility term enters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TermScope {
    #[serde(rename = "RP")]
    Rp,
    #[serde(rename = "SP")]
    Sp,
    All,
}

impl TermScope {
    pub fn includes(self, scope: Scope) -> bool {
        matches!(
            (self, scope),
            (TermScope::All, _) | (TermScope::Rp, Scope::Rp) | (TermScope::Sp, Scope::Sp)
        )
    }

    fn overlaps(self, other: TermScope) -> bool {
        [Scope::Rp, Scope::Sp]
            .iter()
            .any(|s| self.includes(*s) && other.includes(*s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpStructure {
    ModeOnlyMnl,
    NestedDestinationMode,
}

/// Where the value multiplying a coefficient comes from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttributeSource {
    /// Attribute of the alternative itself (mode level-of-service, region attribute).
    Alternative(String),
    /// Decision-maker or trip-context covariate, entered on the alternatives in `applies_to`.
    Person(String),
    /// Product of a person covariate and an alternative attribute.
    Interaction { person: String, alternative: String },
    Constant,
    /// 1 when the alternative's mode equals the respondent's RP-chosen mode.
    StateDependence,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AppliesTo {
    All,
    Modes(BTreeSet<Mode>),
    Regions(BTreeSet<RegionId>),
}

impl AppliesTo {
    pub fn mode(&self, mode: Mode) -> bool {
        match self {
            AppliesTo::All => true,
            AppliesTo::Modes(set) => set.contains(&mode),
            AppliesTo::Regions(_) => false,
        }
    }

    pub fn region(&self, region: RegionId) -> bool {
        match self {
            AppliesTo::All => true,
            AppliesTo::Regions(set) => set.contains(&region),
            AppliesTo::Modes(_) => false,
        }
    }

    fn overlaps(&self, other: &AppliesTo) -> bool {
        match (self, other) {
            (AppliesTo::All, _) | (_, AppliesTo::All) => true,
            (AppliesTo::Modes(a), AppliesTo::Modes(b)) => !a.is_disjoint(b),
            (AppliesTo::Regions(a), AppliesTo::Regions(b)) => !a.is_disjoint(b),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityTerm {
    pub coefficient: String,
    pub source: AttributeSource,
    pub applies_to: AppliesTo,
    pub scope: TermScope,
}

/// One covariate of the logistic logsum-parameter link.
///
/// The covariate is a product of named person/trip attributes; an empty product
/// is the link constant. Products are materialised when data is loaded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaTerm {
    pub coefficient: String,
    pub factors: Vec<String>,
    pub scope: TermScope,
}

impl LambdaTerm {
    /// Key under which the materialised covariate is stored on an observation.
    pub fn covariate_key(&self) -> String {
        if self.factors.is_empty() {
            "constant".to_string()
        } else {
            self.factors.join("*")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VotDefinition {
    pub label: String,
    pub time_coefficient: String,
    pub cost_coefficient: String,
}

/// Person-level attributes available to utility terms and link covariates.
pub const PERSON_ATTRIBUTES: &[&str] = &[
    "age",
    "income",
    "working",
    "male",
    "female",
    "married",
    "single",
    "gov_official",
    "univ_degree",
];

/// Trip-context attributes recorded on each observation.
pub const TRIP_ATTRIBUTES: &[&str] = &["summer", "with_family"];

pub fn is_known_covariate(name: &str) -> bool {
    PERSON_ATTRIBUTES.contains(&name) || TRIP_ATTRIBUTES.contains(&name)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub purpose: Purpose,
    pub destination_terms: Vec<UtilityTerm>,
    pub mode_terms: Vec<UtilityTerm>,
    pub lambda_terms: Vec<LambdaTerm>,
    pub sp_structure: SpStructure,
    pub base_mode: Mode,
    /// Name of the free parameter holding ln(μ); `None` fixes μ = 1.
    pub scale: Option<String>,
    pub choice_sets: ChoiceSetRules,
    pub vot: Vec<VotDefinition>,
    layout: Layout,
}

pub struct ModelSpecBuilder {
    pub purpose: Purpose,
    pub destination_terms: Vec<UtilityTerm>,
    pub mode_terms: Vec<UtilityTerm>,
    pub lambda_terms: Vec<LambdaTerm>,
    pub sp_structure: Option<SpStructure>,
    pub base_mode: Mode,
    pub scale: Option<String>,
    pub choice_sets: ChoiceSetRules,
    pub vot: Vec<VotDefinition>,
}

impl ModelSpecBuilder {
    pub fn new(purpose: Purpose) -> Self {
        Self {
            purpose,
            destination_terms: Vec::new(),
            mode_terms: Vec::new(),
            lambda_terms: Vec::new(),
            sp_structure: None,
            base_mode: Mode::Lcc,
            scale: None,
            choice_sets: ChoiceSetRules::default(),
            vot: Vec::new(),
        }
    }

    pub fn build(self) -> Result<ModelSpec> {
        let default_structure = match self.purpose {
            Purpose::Business => SpStructure::ModeOnlyMnl,
            Purpose::NonBusiness => SpStructure::NestedDestinationMode,
        };
        let sp_structure = self.sp_structure.unwrap_or(default_structure);
        if sp_structure != default_structure {
            return Err(Error::Config(format!(
                "{} models use the {:?} SP structure, got {:?}",
                self.purpose, default_structure, sp_structure
            )));
        }
        for term in &self.destination_terms {
            if matches!(term.applies_to, AppliesTo::Modes(_)) {
                return Err(Error::Config(format!(
                    "destination term `{}` must apply to regions, not modes",
                    term.coefficient
                )));
            }
            if term.source == AttributeSource::StateDependence {
                return Err(Error::Config(format!(
                    "destination term `{}`: state dependence is a mode-level source",
                    term.coefficient
                )));
            }
        }
        for term in &self.mode_terms {
            if matches!(term.applies_to, AppliesTo::Regions(_)) {
                return Err(Error::Config(format!(
                    "mode term `{}` must apply to modes, not regions",
                    term.coefficient
                )));
            }
        }
        let layout = Layout::from_terms(
            &self.destination_terms,
            &self.mode_terms,
            &self.lambda_terms,
            self.scale.as_deref(),
        )?;
        Ok(ModelSpec {
            purpose: self.purpose,
            destination_terms: self.destination_terms,
            mode_terms: self.mode_terms,
            lambda_terms: self.lambda_terms,
            sp_structure,
            base_mode: self.base_mode,
            scale: self.scale,
            choice_sets: self.choice_sets,
            vot: self.vot,
            layout,
        })
    }
}

impl ModelSpec {
    /// A spec with no terms and no scale parameter.
    pub fn empty(purpose: Purpose) -> Self {
        ModelSpecBuilder::new(purpose)
            .build()
            .expect("empty spec is always valid")
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Number of free parameters.
    pub fn num_free(&self) -> usize {
        self.layout.len()
    }

    /// Whether observations of `scope` are nested destination/mode trees.
    pub fn is_nested(&self, scope: Scope) -> bool {
        match scope {
            Scope::Rp => true,
            Scope::Sp => self.sp_structure == SpStructure::NestedDestinationMode,
        }
    }

    pub fn universe(&self, scope: Scope) -> &BTreeSet<Mode> {
        match scope {
            Scope::Rp => &self.choice_sets.rp_universe,
            Scope::Sp => &self.choice_sets.sp_universe,
        }
    }

    /// Attribute names the loaders must find on mode alternatives.
    pub fn required_mode_attributes(&self) -> BTreeSet<String> {
        required_attributes(&self.mode_terms)
    }

    pub fn required_destination_attributes(&self) -> BTreeSet<String> {
        required_attributes(&self.destination_terms)
    }

    pub fn has_state_dependence(&self) -> bool {
        self.mode_terms
            .iter()
            .any(|t| t.source == AttributeSource::StateDependence)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        file::parse(text)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse(m) | Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        file::render(self)
    }

    /// Table-2 layout: 16 free parameters.
    pub fn business_reference() -> Self {
        Self::from_toml_str(include_str!("../../fixtures/business/spec.toml"))
            .expect("bundled business spec parses")
    }

    /// Table-3 layout: 33 free parameters.
    pub fn non_business_reference() -> Self {
        Self::from_toml_str(include_str!("../../fixtures/non_business/spec.toml"))
            .expect("bundled non-business spec parses")
    }
}

fn required_attributes(terms: &[UtilityTerm]) -> BTreeSet<String> {
    terms
        .iter()
        .filter_map(|t| match &t.source {
            AttributeSource::Alternative(a) => Some(a.clone()),
            AttributeSource::Interaction { alternative, .. } => Some(alternative.clone()),
            _ => None,
        })
        .collect()
}

/// Identification diagnostics. An empty list means the spec is normalised:
/// no constant on the base mode, one coefficient per shared attribute, and link
/// covariates that exist in the person/trip schema.
pub fn validate_spec(spec: &ModelSpec) -> Vec<String> {
    let mut out = Vec::new();

    for term in &spec.mode_terms {
        if term.source == AttributeSource::Constant && term.applies_to.mode(spec.base_mode) {
            out.push(format!(
                "base-mode constant must be fixed: `{}` applies to base mode {}",
                term.coefficient, spec.base_mode
            ));
        }
    }

    for terms in [&spec.mode_terms, &spec.destination_terms] {
        for (i, a) in terms.iter().enumerate() {
            for b in &terms[i + 1..] {
                if a.coefficient == b.coefficient || a.source != b.source {
                    continue;
                }
                let attr = match &a.source {
                    AttributeSource::Alternative(x) => x.clone(),
                    AttributeSource::Interaction { person, alternative } => format!("{person}*{alternative}"),
                    _ => continue,
                };
                if a.scope.overlaps(b.scope) && a.applies_to.overlaps(&b.applies_to) {
                    out.push(format!(
                        "attribute `{attr}` has more than one coefficient on shared alternatives: `{}`, `{}`",
                        a.coefficient, b.coefficient
                    ));
                }
            }
        }
    }

    for term in &spec.lambda_terms {
        for factor in &term.factors {
            if !is_known_covariate(factor) {
                out.push(format!(
                    "lambda covariate `{}` of `{}` is not a person or trip attribute",
                    factor, term.coefficient
                ));
            }
        }
    }
    out
}
