#![allow(dead_code)]

use std::path::PathBuf;

use intercity::data::{load_persons, load_regions, load_rp_dataset, load_sp_dataset, ChoiceDataset, PersonTable, RegionTable};
use intercity::spec::{ModelSpec, Purpose};
use intercity::synth::parse_params;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

pub fn spec(purpose: Purpose) -> ModelSpec {
    ModelSpec::from_path(&fixture(&format!("{}/spec.toml", purpose.as_str()))).unwrap()
}

pub fn truth(purpose: Purpose) -> intercity::spec::NamedParams {
    parse_params(&std::fs::read_to_string(fixture(&format!("{}/truth.toml", purpose.as_str()))).unwrap()).unwrap()
}

pub struct FixtureSet {
    pub persons: PersonTable,
    pub regions: RegionTable,
    pub spec: ModelSpec,
    pub rp: ChoiceDataset,
    pub sp: ChoiceDataset,
}

/// The survey-shaped fixture for one purpose.
pub fn load(purpose: Purpose) -> FixtureSet {
    load_from("", purpose.as_str(), spec(purpose))
}

/// The 200-observation non-business fixture.
pub fn load_small() -> FixtureSet {
    load_from("small/", "small", spec(Purpose::NonBusiness))
}

fn load_from(root: &str, dir: &str, spec: ModelSpec) -> FixtureSet {
    let persons = load_persons(&fixture(&format!("{root}persons.csv"))).unwrap();
    let regions = load_regions(&fixture(&format!("{root}regions.csv"))).unwrap();
    let rp = load_rp_dataset(&fixture(&format!("{dir}/rp_trips.csv")), &persons, &regions, &spec).unwrap();
    let sp = load_sp_dataset(&fixture(&format!("{dir}/sp_choices.csv")), &persons, &regions, &spec).unwrap();
    FixtureSet { persons, regions, spec, rp, sp }
}
