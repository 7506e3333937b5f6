//! Delimited-text loaders and writers for persons, regions and choice data,
//! and the estimation results document.

mod choice_csv;
mod csv_util;
mod observation;
mod person;
mod region;
mod results;

pub use choice_csv::{load_rp_dataset, load_sp_dataset, write_choice_dataset, MODE_ATTRIBUTE_COLUMNS, RP_COLUMNS, SP_COLUMNS};
pub use csv_util::COLUMN_UNITS;
pub(crate) use csv_util::{Columns, CsvFile};
pub use observation::{
    build_covariates, trip_context, Attributes, ChoiceDataset, ChoiceObservation, DestinationNest, ModeAlternative,
    RpDataset, SpDataset, STATE_DEPENDENCE_KEY,
};
pub use person::{
    load_persons, write_persons, Education, Gender, Marital, Occupation, Person, PersonTable, PERSON_COLUMNS,
};
pub use region::{load_regions, write_regions, RegionTable, REGION_COLUMNS};

pub use results::{read_results, spec_digest, write_results, ResultsDocument, RESULTS_FORMAT};
