mod common;

use std::fs;

use common::{fixture, load, FixtureSet};
use intercity::data::{
    load_persons, load_regions, load_rp_dataset, load_sp_dataset, write_choice_dataset, write_persons, write_regions,
    ChoiceDataset, RP_COLUMNS, SP_COLUMNS,
};
use intercity::spec::{build_choice_set, Mode, ModelSpec, Purpose, Scope};
use intercity::Error;

#[test]
fn survey_shaped_fixture_counts() {
    let b = load(Purpose::Business);
    assert_eq!(b.rp.len(), 407);
    assert_eq!(b.rp.num_persons(), 247);
    assert_eq!(b.sp.len(), 2432);
    assert_eq!(b.sp.num_persons(), 608);

    let nb = load(Purpose::NonBusiness);
    assert_eq!(nb.rp.len(), 446);
    assert_eq!(nb.sp.len(), 1216);
    assert_eq!(nb.sp.num_persons(), 608);
    assert_eq!(nb.persons.len(), 608);
    assert_eq!(nb.regions.len(), 7);
}

fn check_invariants(set: &FixtureSet) {
    for ds in [&set.rp, &set.sp] {
        for o in &ds.observations {
            let ind = o.indicators();
            assert_eq!(ind.iter().map(|&x| u32::from(x)).sum::<u32>(), 1, "{}", o.id);
            for n in &o.nests {
                let modes: Vec<Mode> = n.alternatives.iter().map(|a| a.mode).collect();
                if ds.scope == Scope::Rp {
                    assert!(!modes.contains(&Mode::Hsr), "{}", o.id);
                }
                if n.distance_km < set.spec.choice_sets.short_distance_km {
                    assert!(!modes.contains(&Mode::Airline) && !modes.contains(&Mode::Lcc), "{}", o.id);
                }
                if n.distance_km > set.spec.choice_sets.long_distance_km {
                    assert!(!modes.contains(&Mode::Car), "{}", o.id);
                }
                let allowed =
                    build_choice_set(n.distance_km, set.spec.universe(ds.scope), ds.scope, &set.spec.choice_sets).unwrap();
                assert!(modes.iter().all(|m| allowed.contains(m)), "{}", o.id);
            }
        }
    }
}

#[test]
fn every_fixture_observation_obeys_the_choice_set_rules() {
    check_invariants(&load(Purpose::Business));
    check_invariants(&load(Purpose::NonBusiness));
    check_invariants(&common::load_small());
}

#[test]
fn loading_is_deterministic() {
    let a = load(Purpose::NonBusiness);
    let b = load(Purpose::NonBusiness);
    assert_eq!(a.rp, b.rp);
    assert_eq!(a.sp, b.sp);
}

#[test]
fn written_datasets_reload_identically() {
    let set = load(Purpose::Business);
    let dir = tempfile::tempdir().unwrap();
    let rp = dir.path().join("rp.csv");
    let sp = dir.path().join("sp.csv");
    let persons = dir.path().join("persons.csv");
    let regions = dir.path().join("regions.csv");
    write_choice_dataset(&set.rp, &rp).unwrap();
    write_choice_dataset(&set.sp, &sp).unwrap();
    write_persons(set.persons.as_slice(), &persons).unwrap();
    write_regions(&set.regions, &regions).unwrap();
    let p2 = load_persons(&persons).unwrap();
    let r2 = load_regions(&regions).unwrap();
    assert_eq!(p2.as_slice(), set.persons.as_slice());
    assert_eq!(load_rp_dataset(&rp, &p2, &r2, &set.spec).unwrap(), set.rp);
    assert_eq!(load_sp_dataset(&sp, &p2, &r2, &set.spec).unwrap(), set.sp);
}

struct Hand {
    dir: tempfile::TempDir,
    spec: ModelSpec,
}

impl Hand {
    fn new(purpose: Purpose) -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
            spec: common::spec(purpose),
        }
    }

    fn rp(&self, rows: &[&str]) -> intercity::Result<ChoiceDataset> {
        let path = self.dir.path().join("rp.csv");
        fs::write(&path, format!("{}\n{}", RP_COLUMNS.join(","), rows.iter().map(|r| format!("{r}\n")).collect::<String>()))
            .unwrap();
        let persons = load_persons(&fixture("persons.csv")).unwrap();
        let regions = load_regions(&fixture("regions.csv")).unwrap();
        load_rp_dataset(&path, &persons, &regions, &self.spec)
    }

    fn sp(&self, rows: &[&str]) -> intercity::Result<ChoiceDataset> {
        let path = self.dir.path().join("sp.csv");
        fs::write(&path, format!("{}\n{}", SP_COLUMNS.join(","), rows.iter().map(|r| format!("{r}\n")).collect::<String>()))
            .unwrap();
        let persons = load_persons(&fixture("persons.csv")).unwrap();
        let regions = load_regions(&fixture("regions.csv")).unwrap();
        load_sp_dataset(&path, &persons, &regions, &self.spec)
    }
}

#[test]
fn air_chosen_on_a_short_trip_is_a_data_error() {
    // Region 2 lies 280 km from the origin.
    let h = Hand::new(Purpose::Business);
    let err = h
        .rp(&[
            "t1,P00001,business,other,other,2,Bus,0.1,5,0.5,20,0",
            "t1,P00001,business,other,other,2,ConventionalRail,0.2,5,0.5,6,0",
            "t1,P00001,business,other,other,2,Airline,1.0,1,1.5,10,1",
            "t1,P00001,business,other,other,2,Car,0.4,4,0,,0",
        ])
        .unwrap_err();
    assert!(err.to_string().contains("chosen mode not in choice set"), "{err}");
}

#[test]
fn unknown_region_is_rejected() {
    let h = Hand::new(Purpose::Business);
    let err = h.rp(&["t1,P00001,business,other,other,9,Bus,0.1,5,0.5,20,1"]).unwrap_err();
    assert!(err.to_string().contains("unknown region id 9"), "{err}");
    assert!(matches!(err, Error::Load { .. }));
}

#[test]
fn empty_file_gives_an_empty_dataset_with_a_warning() {
    let h = Hand::new(Purpose::Business);
    let ds = h.rp(&[]).unwrap();
    assert!(ds.is_empty());
    assert_eq!(ds.warnings.len(), 1);
}

#[test]
fn missing_hsr_row_names_the_scenario() {
    // Region 3 (760 km): the business SP set is Airline, LCC, HSR.
    let h = Hand::new(Purpose::Business);
    let err = h
        .sp(&[
            "s9,P00001,business,other,other,3,,Airline,1.2,1.6,1.5,10,Airline,1",
            "s9,P00001,business,other,other,3,,LCC,0.8,1.6,1.8,4,Airline,0",
        ])
        .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("scenario `s9`") && msg.contains("HSR"), "{msg}");
}

#[test]
fn state_dependence_marks_only_the_rp_mode() {
    let h = Hand::new(Purpose::Business);
    let ds = h
        .sp(&[
            "s1,P00001,business,other,other,3,,Airline,1.2,1.6,1.5,10,Airline,0",
            "s1,P00001,business,other,other,3,,LCC,0.8,1.6,1.8,4,Airline,0",
            "s1,P00001,business,other,other,3,,HSR,0.6,2.5,0.7,30,Airline,1",
        ])
        .unwrap();
    let o = &ds.observations[0];
    assert_eq!(o.rp_chosen_mode, Some(Mode::Airline));
    for a in &o.nests[0].alternatives {
        let sd = a.attributes["state_dependence"];
        assert_eq!(sd, if a.mode == Mode::Airline { 1.0 } else { 0.0 }, "{}", a.mode);
    }
}

#[test]
fn malformed_number_cites_the_line() {
    let h = Hand::new(Purpose::Business);
    let err = h
        .rp(&[
            "t1,P00001,business,other,other,3,Bus,0.1,5,0.5,20,0",
            "t1,P00001,business,other,other,3,Airline,abc,1,1.5,10,1",
        ])
        .unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
}
