use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::person::Person;
use crate::error::{Error, Result};
use crate::spec::{Mode, ModelSpec, Purpose, RegionId, Scope};

pub type Attributes = BTreeMap<String, f64>;

/// Attribute key carrying the state-dependence indicator on SP alternatives.
pub const STATE_DEPENDENCE_KEY: &str = "state_dependence";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeAlternative {
    pub mode: Mode,
    pub attributes: Attributes,
}

/// One destination and the modes available to reach it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DestinationNest {
    pub region: RegionId,
    pub distance_km: f64,
    pub attributes: Attributes,
    pub alternatives: Vec<ModeAlternative>,
}

/// A single choice situation: an RP trip or one SP scenario answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceObservation {
    pub id: String,
    pub person_id: String,
    pub scope: Scope,
    pub purpose: Purpose,
    /// Person attributes, trip context and materialised link products.
    pub covariates: Attributes,
    pub rp_chosen_mode: Option<Mode>,
    pub nests: Vec<DestinationNest>,
    pub chosen_nest: usize,
    pub chosen_alt: usize,
}

impl ChoiceObservation {
    pub fn chosen_region(&self) -> RegionId {
        self.nests[self.chosen_nest].region
    }

    pub fn chosen_mode(&self) -> Mode {
        self.nests[self.chosen_nest].alternatives[self.chosen_alt].mode
    }

    pub fn num_leaves(&self) -> usize {
        self.nests.iter().map(|n| n.alternatives.len()).sum()
    }

    /// Choice indicators per leaf, nest-major.
    pub fn indicators(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_leaves());
        for (d, nest) in self.nests.iter().enumerate() {
            for a in 0..nest.alternatives.len() {
                out.push(u8::from(d == self.chosen_nest && a == self.chosen_alt));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceDataset {
    pub scope: Scope,
    pub purpose: Purpose,
    pub observations: Vec<ChoiceObservation>,
    pub warnings: Vec<String>,
}

impl ChoiceDataset {
    pub fn empty(scope: Scope, purpose: Purpose) -> Self {
        Self {
            scope,
            purpose,
            observations: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Distinct decision makers (respondents for SP, travellers for RP).
    pub fn num_persons(&self) -> usize {
        let mut ids: Vec<&str> = self.observations.iter().map(|o| o.person_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

pub type RpDataset = ChoiceDataset;
pub type SpDataset = ChoiceDataset;

/// Trip-context covariates from the diary/scenario row.
pub fn trip_context(summer: Option<bool>, with_family: Option<bool>) -> Attributes {
    let mut out = Attributes::new();
    if let Some(s) = summer {
        out.insert("summer".into(), f64::from(u8::from(s)));
    }
    if let Some(f) = with_family {
        out.insert("with_family".into(), f64::from(u8::from(f)));
    }
    out
}

/// Person attributes, trip context, and every link product the spec needs for `scope`.
pub fn build_covariates(person: &Person, trip: &Attributes, spec: &ModelSpec, scope: Scope) -> Result<Attributes> {
    let mut cov = person.attributes();
    cov.extend(trip.iter().map(|(k, v)| (k.clone(), *v)));
    for term in &spec.lambda_terms {
        if !term.scope.includes(scope) {
            continue;
        }
        let mut product = 1.0;
        for factor in &term.factors {
            product *= *cov.get(factor).ok_or_else(|| {
                Error::Data(format!(
                    "person `{}`: link covariate `{}` needs `{factor}`, which is not recorded",
                    person.id,
                    term.covariate_key()
                ))
            })?;
        }
        if !product.is_finite() {
            return Err(Error::Data(format!(
                "person `{}`: link covariate `{}` is not finite",
                person.id,
                term.covariate_key()
            )));
        }
        cov.insert(term.covariate_key(), product);
    }
    Ok(cov)
}

