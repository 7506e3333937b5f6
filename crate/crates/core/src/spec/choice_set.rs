use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Mode, Scope};
use crate::error::{Error, Result};

/// Distance-based availability rules and the per-dataset mode universes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceSetRules {
    /// Air modes are dropped below this distance.
    pub short_distance_km: f64,
    /// Car is dropped above this distance.
    pub long_distance_km: f64,
    pub rp_universe: BTreeSet<Mode>,
    pub sp_universe: BTreeSet<Mode>,
}

impl Default for ChoiceSetRules {
    fn default() -> Self {
        let rp: BTreeSet<Mode> = [Mode::Bus, Mode::ConventionalRail, Mode::Airline, Mode::Lcc, Mode::Car].into();
        let mut sp = rp.clone();
        sp.insert(Mode::Hsr);
        Self {
            short_distance_km: 300.0,
            long_distance_km: 1300.0,
            rp_universe: rp,
            sp_universe: sp,
        }
    }
}

/// Applies the distance rules to `universe`.
///
/// Airline and LCC are removed below the short-distance threshold, Car above
/// the long-distance threshold, and HSR from any RP choice set.
pub fn build_choice_set(
    distance_km: f64,
    universe: &BTreeSet<Mode>,
    dataset: Scope,
    rules: &ChoiceSetRules,
) -> Result<BTreeSet<Mode>> {
    if !(distance_km > 0.0) || !distance_km.is_finite() {
        return Err(Error::Config(format!("trip distance must be positive, got {distance_km}")));
    }
    if universe.is_empty() {
        return Err(Error::Config("mode universe is empty".into()));
    }
    let mut set = universe.clone();
    let mut last_rule = "";
    if distance_km < rules.short_distance_km {
        set.remove(&Mode::Airline);
        set.remove(&Mode::Lcc);
        last_rule = "short-distance rule (no Airline/LCC)";
        if set.is_empty() {
            return Err(empty(last_rule, distance_km));
        }
    }
    if distance_km > rules.long_distance_km {
        set.remove(&Mode::Car);
        last_rule = "long-distance rule (no Car)";
        if set.is_empty() {
            return Err(empty(last_rule, distance_km));
        }
    }
    if dataset == Scope::Rp {
        set.remove(&Mode::Hsr);
        last_rule = "RP rule (no HSR)";
    }
    if set.is_empty() {
        return Err(empty(last_rule, distance_km));
    }
    Ok(set)
}

fn empty(rule: &str, distance_km: f64) -> Error {
    Error::Config(format!("choice set emptied by the {rule} at {distance_km} km"))
}
