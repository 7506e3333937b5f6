use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{LambdaTerm, ModelSpec, UtilityTerm};
use crate::error::{Error, Result};

pub type NamedParams = BTreeMap<String, f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Destination,
    Mode,
    LambdaLink,
    /// Stored as ln(μ); the natural value is `exp` of the free value.
    LogScale,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
}

/// Bijection between free-parameter names and positions `0..K`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(from = "Vec<ParamEntry>", into = "Vec<ParamEntry>")]
pub struct Layout {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl From<Vec<ParamEntry>> for Layout {
    fn from(entries: Vec<ParamEntry>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        Self { entries, index }
    }
}

impl From<Layout> for Vec<ParamEntry> {
    fn from(layout: Layout) -> Self {
        layout.entries
    }
}

impl Layout {
    pub(super) fn from_terms(
        destination: &[UtilityTerm],
        mode: &[UtilityTerm],
        lambda: &[LambdaTerm],
        scale: Option<&str>,
    ) -> Result<Self> {
        let mut layout = Layout::default();
        for t in destination {
            layout.push(&t.coefficient, ParamKind::Destination)?;
        }
        for t in mode {
            layout.push(&t.coefficient, ParamKind::Mode)?;
        }
        for t in lambda {
            layout.push(&t.coefficient, ParamKind::LambdaLink)?;
        }
        if let Some(name) = scale {
            layout.push(name, ParamKind::LogScale)?;
        }
        Ok(layout)
    }

    fn push(&mut self, name: &str, kind: ParamKind) -> Result<()> {
        if name.is_empty() {
            return Err(Error::Config("empty coefficient name".into()));
        }
        match self.index.get(name) {
            Some(&i) if self.entries[i].kind == kind => Ok(()),
            Some(&i) => Err(Error::Config(format!(
                "coefficient `{name}` is used as both {:?} and {:?}",
                self.entries[i].kind, kind
            ))),
            None => {
                self.index.insert(name.to_string(), self.entries.len());
                self.entries.push(ParamEntry {
                    name: name.to_string(),
                    kind,
                });
                Ok(())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn scale_index(&self) -> Option<usize> {
        self.entries.iter().position(|e| e.kind == ParamKind::LogScale)
    }
}

/// Free parameter values in layout order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(layout: &Layout) -> Self {
        Self {
            layout: layout.clone(),
            values: vec![0.0; layout.len()],
        }
    }

    pub fn from_values(layout: &Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Validation(format!(
                "parameter vector has {} values for a {}-slot layout",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self {
            layout: layout.clone(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.layout.index_of(name).map(|i| self.values[i])
    }

    /// Value on the natural scale (μ rather than ln μ).
    pub fn natural(&self, name: &str) -> Option<f64> {
        let i = self.layout.index_of(name)?;
        Some(match self.layout.entries[i].kind {
            ParamKind::LogScale => self.values[i].exp(),
            _ => self.values[i],
        })
    }
}

/// Packs a name→value map into the spec's layout. Values are free-space
/// (the scale entry is ln μ).
pub fn pack_parameters(spec: &ModelSpec, named: &NamedParams) -> Result<ParameterVector> {
    let layout = spec.layout();
    let missing: Vec<&str> = layout.names().filter(|n| !named.contains_key(*n)).collect();
    let unknown: Vec<&str> = named
        .keys()
        .map(String::as_str)
        .filter(|n| layout.index_of(n).is_none())
        .collect();
    if !missing.is_empty() || !unknown.is_empty() {
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(format!("missing: {}", missing.join(", ")));
        }
        if !unknown.is_empty() {
            parts.push(format!("unknown: {}", unknown.join(", ")));
        }
        return Err(Error::Validation(format!("parameter map does not match spec ({})", parts.join("; "))));
    }
    let values = layout.names().map(|n| named[n]).collect();
    Ok(ParameterVector {
        layout: layout.clone(),
        values,
    })
}

pub fn unpack_parameters(vec: &ParameterVector, spec: &ModelSpec) -> Result<NamedParams> {
    let layout = spec.layout();
    if vec.values.len() != layout.len() {
        return Err(Error::Validation(format!(
            "parameter vector has {} values for a {}-slot layout",
            vec.values.len(),
            layout.len()
        )));
    }
    if &vec.layout != layout {
        return Err(Error::Validation("parameter vector layout differs from spec layout".into()));
    }
    Ok(layout
        .names()
        .zip(&vec.values)
        .map(|(n, v)| (n.to_string(), *v))
        .collect())
}
