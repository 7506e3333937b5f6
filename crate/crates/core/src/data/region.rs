use std::collections::BTreeMap;
use std::path::Path;

use super::csv_util::{Columns, CsvFile};
use crate::error::{Error, Result};
use crate::spec::{Region, RegionId};

pub const REGION_COLUMNS: &[&str] = &["region_id", "name", "gdp", "tourist_count", "attraction_score", "distance_km"];

/// Destination regions keyed by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegionTable {
    regions: BTreeMap<RegionId, Region>,
}

impl RegionTable {
    pub fn new(regions: impl IntoIterator<Item = Region>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for r in regions {
            r.validate()?;
            let id = r.id;
            if map.insert(id, r).is_some() {
                return Err(Error::Validation(format!("duplicate region id {id}")));
            }
        }
        Ok(Self { regions: map })
    }

    pub fn get(&self, id: RegionId) -> Option<&Region> {
        self.regions.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Region> {
        self.regions.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = RegionId> + '_ {
        self.regions.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

pub fn load_regions(path: &Path) -> Result<RegionTable> {
    let mut file = CsvFile::open(path)?;
    let cols = Columns::resolve(&file, REGION_COLUMNS, &[])?;
    let mut regions = Vec::new();
    let mut seen = BTreeMap::new();
    while let Some(rec) = file.next_record()? {
        let region = Region {
            id: rec.parse(&cols, "region_id")?,
            name: rec.text(&cols, "name")?.to_string(),
            gdp: rec.number(&cols, "gdp")?,
            tourist_count: rec.number(&cols, "tourist_count")?,
            attraction_score: rec.number(&cols, "attraction_score")?,
            distance_km: rec.number(&cols, "distance_km")?,
        };
        region.validate().map_err(|e| rec.error(e.to_string()))?;
        if seen.insert(region.id, rec.line).is_some() {
            return Err(rec.error(format!("duplicate region id {}", region.id)));
        }
        regions.push(region);
    }
    RegionTable::new(regions)
}

pub fn write_regions(regions: &RegionTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::load(path, None, e.to_string()))?;
    let io = |e: csv::Error| Error::load(path, None, e.to_string());
    w.write_record(REGION_COLUMNS).map_err(io)?;
    for r in regions.iter() {
        w.write_record([
            r.id.to_string(),
            r.name.clone(),
            r.gdp.to_string(),
            r.tourist_count.to_string(),
            r.attraction_score.to_string(),
            r.distance_km.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
