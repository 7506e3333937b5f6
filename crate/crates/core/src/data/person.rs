use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::csv_util::{Columns, CsvFile};
use crate::error::{Error, Result};
use crate::spec::RegionId;

macro_rules! categorical {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "invalid {} `{}` (expected one of: {})",
                        stringify!($name).to_ascii_lowercase(),
                        other,
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

categorical!(Gender { Male => "male", Female => "female" });
categorical!(Marital { Single => "single", Married => "married", Other => "other" });
categorical!(Occupation {
    GovernmentOfficial => "gov_official",
    IndustrialLaborer => "industrial_laborer",
    Merchant => "merchant",
    HousewifeJoblessRetired => "housewife_jobless_retired",
    Student => "student",
    Other => "other",
});
categorical!(Education {
    SeniorHigh => "senior_high",
    CollegeVocational => "college_vocational",
    Bachelor => "bachelor",
    MasterDoctor => "master_doctor",
    Other => "other",
});

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Person {
    pub id: String,
    pub age: f64,
    pub gender: Gender,
    pub marital: Marital,
    pub occupation: Occupation,
    pub education: Education,
    /// Mil VND per month.
    pub income: f64,
    pub working: bool,
    pub home_region: RegionId,
}

impl Person {
    /// Numeric person attribute by name; see [`crate::spec::PERSON_ATTRIBUTES`].
    pub fn attribute(&self, name: &str) -> Option<f64> {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        Some(match name {
            "age" => self.age,
            "income" => self.income,
            "working" => flag(self.working),
            "male" => flag(self.gender == Gender::Male),
            "female" => flag(self.gender == Gender::Female),
            "married" => flag(self.marital == Marital::Married),
            "single" => flag(self.marital == Marital::Single),
            "gov_official" => flag(self.occupation == Occupation::GovernmentOfficial),
            "univ_degree" => flag(matches!(self.education, Education::Bachelor | Education::MasterDoctor)),
            _ => return None,
        })
    }

    pub fn attributes(&self) -> BTreeMap<String, f64> {
        crate::spec::PERSON_ATTRIBUTES
            .iter()
            .map(|n| (n.to_string(), self.attribute(n).expect("listed attribute")))
            .collect()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.age >= 18.0) || !self.age.is_finite() {
            return Err(format!("age {} out of range (respondents are 18 or older)", self.age));
        }
        if !(self.income >= 0.0) || !self.income.is_finite() {
            return Err(format!("income {} out of range (must be >= 0)", self.income));
        }
        Ok(())
    }
}

/// Persons keyed by id, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PersonTable {
    persons: Vec<Person>,
    index: HashMap<String, usize>,
}

impl PersonTable {
    pub fn new(persons: Vec<Person>) -> Result<Self> {
        let mut index = HashMap::with_capacity(persons.len());
        for (i, p) in persons.iter().enumerate() {
            if index.insert(p.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate person id `{}`", p.id)));
            }
            p.validate().map_err(Error::Validation)?;
        }
        Ok(Self { persons, index })
    }

    pub fn get(&self, id: &str) -> Option<&Person> {
        self.index.get(id).map(|&i| &self.persons[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Person> {
        self.persons.iter()
    }

    pub fn as_slice(&self) -> &[Person] {
        &self.persons
    }

    pub fn len(&self) -> usize {
        self.persons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.persons.is_empty()
    }
}

pub const PERSON_COLUMNS: &[&str] = &[
    "person_id",
    "age",
    "gender",
    "marital",
    "occupation",
    "education",
    "income",
    "working",
    "home_region",
];

pub fn load_persons(path: &Path) -> Result<PersonTable> {
    let mut file = CsvFile::open(path)?;
    let cols = Columns::resolve(&file, PERSON_COLUMNS, &[])?;
    let mut persons = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    while let Some(rec) = file.next_record()? {
        let row = rec.line;
        let id = rec.text(&cols, "person_id")?.to_string();
        if id.is_empty() {
            return Err(Error::load(path, Some(row), "empty person_id"));
        }
        if let Some(prev) = index.get(&id) {
            return Err(Error::load(
                path,
                Some(row),
                format!("duplicate person id `{id}` (first seen on line {prev})"),
            ));
        }
        let person = Person {
            id: id.clone(),
            age: rec.number(&cols, "age")?,
            gender: rec.parse(&cols, "gender")?,
            marital: rec.parse(&cols, "marital")?,
            occupation: rec.parse(&cols, "occupation")?,
            education: rec.parse(&cols, "education")?,
            income: rec.number(&cols, "income")?,
            working: rec.flag(&cols, "working")?,
            home_region: rec.parse(&cols, "home_region")?,
        };
        person.validate().map_err(|m| Error::load(path, Some(row), m))?;
        index.insert(id, row);
        persons.push(person);
    }
    PersonTable::new(persons)
}

pub fn write_persons(persons: &[Person], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::load(path, None, e.to_string()))?;
    let io = |e: csv::Error| Error::load(path, None, e.to_string());
    w.write_record(PERSON_COLUMNS).map_err(io)?;
    for p in persons {
        w.write_record([
            p.id.clone(),
            p.age.to_string(),
            p.gender.to_string(),
            p.marital.to_string(),
            p.occupation.to_string(),
            p.education.to_string(),
            p.income.to_string(),
            (p.working as u8).to_string(),
            p.home_region.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
