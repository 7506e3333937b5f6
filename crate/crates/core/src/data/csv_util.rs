//! Header-checked CSV reading with row-numbered diagnostics and unit-suffix checks.

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Fixed units per numeric column. A header may carry the unit as a bracketed
/// suffix (`travel_cost[mil_vnd]`); a suffix that disagrees is rejected.
pub const COLUMN_UNITS: &[(&str, &str)] = &[
    ("travel_cost", "mil_vnd"),
    ("in_vehicle_time", "h"),
    ("access_egress_time", "h"),
    ("frequency", "per_day"),
    ("distance_km", "km"),
    ("income", "mil_vnd"),
    ("age", "years"),
    ("gdp", "1e6_mil_vnd"),
    ("tourist_count", "million"),
];

fn expected_unit(column: &str) -> Option<&'static str> {
    COLUMN_UNITS.iter().find(|(c, _)| *c == column).map(|(_, u)| *u)
}

pub struct CsvFile {
    pub path: PathBuf,
    reader: csv::Reader<File>,
    headers: HashMap<String, usize>,
    record: csv::StringRecord,
}

impl CsvFile {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let raw = reader
            .headers()
            .map_err(|e| Error::load(path, Some(1), format!("unreadable header: {e}")))?
            .clone();
        let mut headers = HashMap::new();
        for (i, h) in raw.iter().enumerate() {
            let (name, unit) = split_unit(h);
            if let Some(unit) = unit {
                match expected_unit(name) {
                    Some(expected) if expected.eq_ignore_ascii_case(unit) => {}
                    Some(expected) => {
                        return Err(Error::load(
                            path,
                            Some(1),
                            format!("column `{name}` is in {expected}, header says [{unit}]"),
                        ))
                    }
                    None => {
                        return Err(Error::load(
                            path,
                            Some(1),
                            format!("column `{name}` does not take a unit suffix (got [{unit}])"),
                        ))
                    }
                }
            }
            if headers.insert(name.to_string(), i).is_some() {
                return Err(Error::load(path, Some(1), format!("duplicate column `{name}`")));
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            reader,
            headers,
            record: csv::StringRecord::new(),
        })
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.headers.contains_key(name)
    }

    pub fn next_record(&mut self) -> Result<Option<Record<'_>>> {
        match self.reader.read_record(&mut self.record) {
            Ok(true) => {
                let line = self.record.position().map(|p| p.line() as usize).unwrap_or(0);
                Ok(Some(Record {
                    path: &self.path,
                    line,
                    fields: &self.record,
                }))
            }
            Ok(false) => Ok(None),
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize);
                Err(Error::load(&self.path, line, format!("malformed record: {e}")))
            }
        }
    }
}

fn split_unit(header: &str) -> (&str, Option<&str>) {
    let header = header.trim();
    match (header.find('['), header.ends_with(']')) {
        (Some(open), true) => (header[..open].trim(), Some(&header[open + 1..header.len() - 1])),
        _ => (header, None),
    }
}

/// Column positions resolved against a header.
pub struct Columns {
    positions: HashMap<&'static str, usize>,
}

impl Columns {
    pub fn resolve(file: &CsvFile, required: &[&'static str], optional: &[&'static str]) -> Result<Self> {
        let mut positions = HashMap::new();
        let missing: Vec<&str> = required.iter().copied().filter(|c| !file.headers.contains_key(*c)).collect();
        if !missing.is_empty() {
            return Err(Error::load(
                &file.path,
                Some(1),
                format!("missing column(s): {}", missing.join(", ")),
            ));
        }
        for c in required.iter().chain(optional) {
            if let Some(&i) = file.headers.get(*c) {
                positions.insert(*c, i);
            }
        }
        Ok(Self { positions })
    }

    pub fn has(&self, name: &str) -> bool {
        self.positions.contains_key(name)
    }
}

pub struct Record<'a> {
    path: &'a Path,
    pub line: usize,
    fields: &'a csv::StringRecord,
}

impl Record<'_> {
    fn err(&self, msg: String) -> Error {
        Error::load(self.path, Some(self.line), msg)
    }

    /// Raw text of a column; empty when the column is absent.
    pub fn text(&self, cols: &Columns, name: &str) -> Result<&str> {
        match cols.positions.get(name) {
            Some(&i) => self
                .fields
                .get(i)
                .ok_or_else(|| self.err(format!("row is missing field `{name}`"))),
            None => Ok(""),
        }
    }

    pub fn number(&self, cols: &Columns, name: &str) -> Result<f64> {
        let t = self.text(cols, name)?;
        let v: f64 = t
            .parse()
            .map_err(|_| self.err(format!("column `{name}`: cannot parse `{t}` as a number")))?;
        if !v.is_finite() {
            return Err(self.err(format!("column `{name}`: value must be finite")));
        }
        Ok(v)
    }

    /// `None` when the column is absent or the cell is empty.
    pub fn opt_number(&self, cols: &Columns, name: &str) -> Result<Option<f64>> {
        if !cols.has(name) || self.text(cols, name)?.is_empty() {
            return Ok(None);
        }
        self.number(cols, name).map(Some)
    }

    pub fn parse<T: FromStr>(&self, cols: &Columns, name: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let t = self.text(cols, name)?;
        t.parse()
            .map_err(|e| self.err(format!("column `{name}`: {e}")))
    }

    pub fn flag(&self, cols: &Columns, name: &str) -> Result<bool> {
        match self.text(cols, name)? {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            other => Err(self.err(format!("column `{name}`: expected 0 or 1, got `{other}`"))),
        }
    }

    pub fn error(&self, msg: impl Into<String>) -> Error {
        self.err(msg.into())
    }
}
