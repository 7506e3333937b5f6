use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};

use intercity::data::{
    load_persons, load_regions, load_rp_dataset, load_sp_dataset, read_results, write_choice_dataset, write_persons,
    write_regions, write_results, ChoiceDataset, ResultsDocument,
};
use intercity::engine::Fault;
use intercity::estimation::{estimate as run_estimation, EstimationControls, Reduction};
use intercity::forecast::{
    accessibility_table, forecast_demand, induced_travel, write_accessibility, ForecastModel, Scenario,
};
use intercity::spec::{pack_parameters, ModelSpec, NamedParams, ParameterVector, Purpose};
use intercity::synth::{
    design_base_scenario, design_scenario, parse_params, parse_tripgen_truth, simulate_choices, simulate_population,
    simulate_trip_counts, Marginals, TripsPerPerson,
};
use intercity::tripgen::{
    fit_from_coefficients, fit_linear, fit_negbin_with, fit_poisson, load_tripgen_records, read_tripgen_models,
    write_tripgen_models, write_tripgen_records, InterceptMode, NegBinOptions, RegressionModel, TripGenModels,
};
use intercity::validate::{validate as run_validation, FailingPoint, ValidationOptions};

use crate::{
    table, AccessibilityArgs, DataArgs, EstimateArgs, FamilyArg, FaultArg, ForecastArgs, InterceptArg, SimulateArgs,
    Status, TripgenArgs, ValidateArgs,
};

struct Loaded {
    spec: ModelSpec,
    rp: ChoiceDataset,
    sp: ChoiceDataset,
}

fn load_data(a: &DataArgs) -> Result<Loaded> {
    let spec = ModelSpec::from_path(&a.spec).context("--spec")?;
    let persons = load_persons(&a.persons).context("--persons")?;
    let regions = load_regions(&a.regions).context("--regions")?;
    let rp = load_rp_dataset(&a.rp, &persons, &regions, &spec).context("--rp")?;
    let sp = load_sp_dataset(&a.sp, &persons, &regions, &spec).context("--sp")?;
    for w in rp.warnings.iter().chain(&sp.warnings) {
        warn!("{w}");
    }
    info!("{} RP and {} SP observations", rp.len(), sp.len());
    Ok(Loaded { spec, rp, sp })
}

/// Start values from a results document or a `name = value` TOML table.
/// Parameters the file does not mention start at zero.
fn read_start(path: &Path, spec: &ModelSpec) -> Result<ParameterVector> {
    let text = fs::read_to_string(path).with_context(|| format!("--start {}", path.display()))?;
    let given: NamedParams = if path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{') {
        ResultsDocument::from_json(&text).context("--start")?.result.named()
    } else {
        parse_params(&text).context("--start")?
    };
    let mut named = NamedParams::new();
    for name in spec.layout().names() {
        match given.get(name) {
            Some(v) => {
                named.insert(name.to_string(), *v);
            }
            None => {
                info!("--start: {name} not given, starting at 0");
                named.insert(name.to_string(), 0.0);
            }
        }
    }
    let unknown: Vec<&str> = given.keys().map(String::as_str).filter(|n| !named.contains_key(*n)).collect();
    if !unknown.is_empty() {
        bail!("--start: parameters not in the spec: {}", unknown.join(", "));
    }
    Ok(pack_parameters(spec, &named)?)
}

pub fn estimate(a: EstimateArgs, deterministic: bool) -> Result<Status> {
    let d = load_data(&a.data)?;
    let start = match &a.start {
        Some(p) => read_start(p, &d.spec)?,
        None => ParameterVector::zeros(d.spec.layout()),
    };
    let controls = EstimationControls {
        tol: a.tol,
        max_iter: a.max_iter,
        reduction: if deterministic { Reduction::Ordered } else { Reduction::Unordered },
        ..EstimationControls::default()
    };
    let r = run_estimation(&d.rp, &d.sp, &d.spec, &start, &controls)?;
    write_results(&r, &d.spec, &a.out).context("--out")?;
    print!("{}", table::estimation(&r));
    Ok(if r.convergence.converged { Status::Success } else { Status::NotConverged })
}

fn read_model_docs(paths: &[PathBuf]) -> Result<Vec<ResultsDocument>> {
    let mut docs: Vec<ResultsDocument> = Vec::new();
    for p in paths {
        let doc = read_results(p).context("--model")?;
        if docs.iter().any(|d| d.result.purpose == doc.result.purpose) {
            bail!("--model: two models for {} trips", doc.result.purpose);
        }
        docs.push(doc);
    }
    Ok(docs)
}

fn forecast_models(docs: &[ResultsDocument], fits: &TripGenModels) -> Result<Vec<ForecastModel>> {
    docs.iter()
        .map(|doc| {
            let purpose = doc.result.purpose;
            let fit = fits
                .fits
                .get(&purpose)
                .ok_or_else(|| anyhow!("--tripgen has no model for {purpose} trips"))?
                .clone();
            let spec = doc.model_spec().context("--model")?;
            Ok(ForecastModel::new(&spec, &doc.result.named(), fit)?)
        })
        .collect()
}

pub fn forecast(a: ForecastArgs) -> Result<Status> {
    let docs = read_model_docs(&a.models)?;
    let fits = read_tripgen_models(&a.tripgen).context("--tripgen")?;
    let models = forecast_models(&docs, &fits)?;
    let base = Scenario::from_path(&a.base_scenario).context("--base-scenario")?;
    let alt = Scenario::from_path(&a.scenario).context("--scenario")?;
    let population = load_persons(&a.population).context("--population")?;

    let base_demand = forecast_demand(population.as_slice(), &base, &models, a.mu3)?;
    let alt_demand = forecast_demand(population.as_slice(), &alt, &models, a.mu3)?;
    let report = induced_travel(&base_demand, &alt_demand)?;

    fs::create_dir_all(&a.out).with_context(|| format!("--out {}", a.out.display()))?;
    base_demand.write_csv(&a.out.join("base_demand.csv"))?;
    alt_demand.write_csv(&a.out.join("alternative_demand.csv"))?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(a.out.join("induced_report.json"), json).context("writing induced_report.json")?;
    print!("{}", table::forecast(&report));
    Ok(Status::Success)
}

fn read_replay(path: &Path) -> Result<Vec<NamedParams>> {
    let text = fs::read_to_string(path).with_context(|| format!("--at {}", path.display()))?;
    if let Ok(points) = serde_json::from_str::<Vec<FailingPoint>>(&text) {
        return Ok(points.into_iter().map(|p| p.parameters).collect());
    }
    let one: FailingPoint = serde_json::from_str(&text).with_context(|| format!("--at {}: not a failing-point file", path.display()))?;
    Ok(vec![one.parameters])
}

pub fn validate(a: ValidateArgs) -> Result<Status> {
    let d = load_data(&a.data)?;
    let opts = ValidationOptions {
        points: a.points as usize,
        seed: a.seed,
        fault: match a.inject_fault {
            Some(FaultArg::LambdaSign) => Fault::LambdaSign,
            None => Fault::None,
        },
        ..ValidationOptions::default()
    };
    let fixed = a.at.as_deref().map(read_replay).transpose()?;
    let report = run_validation(&d.rp, &d.sp, &d.spec, &opts, fixed.as_deref())?;
    print!("{}", table::validation(&report));
    if report.passed() {
        return Ok(Status::Success);
    }
    if let Some(out) = &a.replay_out {
        let json = serde_json::to_string_pretty(&report.failures)? + "\n";
        fs::write(out, json).with_context(|| format!("--replay-out {}", out.display()))?;
    }
    eprintln!("first failing point:\n{}", serde_json::to_string_pretty(&report.failures[0])?);
    Ok(Status::ValidationFailed)
}

pub fn tripgen(a: TripgenArgs) -> Result<Status> {
    let purpose: Purpose = a.purpose.parse().map_err(|e| anyhow!("--purpose: {e}"))?;
    let persons = load_persons(&a.persons).context("--persons")?;
    let records: Vec<_> = load_tripgen_records(&a.records, &persons)
        .context("--records")?
        .into_iter()
        .filter(|r| r.purpose == purpose)
        .collect();
    if records.is_empty() {
        bail!("--records has no {purpose} rows");
    }
    let covariates: Vec<&str> = a.covariates.iter().map(String::as_str).collect();
    if a.fixed_theta.is_some() && !matches!(a.family, FamilyArg::NegativeBinomial) {
        bail!("--fixed-theta applies only to --family negative-binomial");
    }
    let fit = match a.family {
        FamilyArg::Linear => fit_linear(
            &records,
            &covariates,
            match a.intercept {
                InterceptArg::Free => InterceptMode::Free,
                InterceptArg::FixedZero => InterceptMode::FixedZero,
            },
        )?,
        FamilyArg::Poisson => fit_poisson(&records, &covariates)?,
        FamilyArg::NegativeBinomial => fit_negbin_with(
            &records,
            &covariates,
            &NegBinOptions {
                fixed_theta: a.fixed_theta,
                ..NegBinOptions::default()
            },
        )?,
    };
    let mut models = if a.merge && a.out.exists() {
        read_tripgen_models(&a.out).context("--merge")?
    } else {
        TripGenModels::default()
    };
    models.fits.insert(purpose, fit.clone());
    write_tripgen_models(&models, &a.out).context("--out")?;
    print!("{}", table::tripgen(&fit, purpose));
    Ok(if fit.converged { Status::Success } else { Status::NotConverged })
}

pub fn accessibility(a: AccessibilityArgs) -> Result<Status> {
    let docs = read_model_docs(&a.models)?;
    let placeholder = fit_from_coefficients(RegressionModel::Poisson, &[]);
    let models = docs
        .iter()
        .map(|doc| Ok(ForecastModel::new(&doc.model_spec()?, &doc.result.named(), placeholder.clone())?))
        .collect::<Result<Vec<_>>>()?;
    let scenario = Scenario::from_path(&a.scenario).context("--scenario")?;
    let population = load_persons(&a.population).context("--population")?;
    let rows = accessibility_table(population.as_slice(), &scenario, &models, a.mu3)?;
    write_accessibility(&rows, &a.out).context("--out")?;
    println!("{} accessibility values written to {}", rows.len(), a.out.display());
    Ok(Status::Success)
}

fn spec_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_add(0x9E37_79B9u64.wrapping_mul(k as u64 + 1))
}


fn per_spec(values: &[usize], k: usize) -> Option<usize> {
    match values.len() {
        0 => None,
        1 => Some(values[0]),
        _ => Some(values[k]),
    }
}

/// Trips per reporting person: `total` spread so counts differ by at most one, larger counts first.
fn rp_allocation(persons: usize, total: usize) -> Vec<usize> {
    if persons == 0 {
        return Vec::new();
    }
    (0..persons).map(|i| total / persons + usize::from(i < total % persons)).collect()
}

pub fn simulate(a: SimulateArgs) -> Result<Status> {
    if a.specs.len() != a.truths.len() {
        bail!("{} --spec but {} --truth; give one truth file per spec", a.specs.len(), a.truths.len());
    }
    for (flag, v) in [("--sp-trips", &a.sp_trips), ("--rp-persons", &a.rp_persons), ("--rp-total", &a.rp_total)] {
        if v.len() > 1 && v.len() != a.specs.len() {
            bail!("{flag} takes one value or one per --spec");
        }
    }
    let mut specs = Vec::new();
    for (s, t) in a.specs.iter().zip(&a.truths) {
        let spec = ModelSpec::from_path(s).with_context(|| format!("--spec {}", s.display()))?;
        let text = fs::read_to_string(t).with_context(|| format!("--truth {}", t.display()))?;
        let truth = parse_params(&text).with_context(|| format!("--truth {}", t.display()))?;
        pack_parameters(&spec, &truth).with_context(|| format!("--truth {}", t.display()))?;
        if specs.iter().any(|(sp, _): &(ModelSpec, NamedParams)| sp.purpose == spec.purpose) {
            bail!("--spec: two specs for {} trips", spec.purpose);
        }
        specs.push((spec, truth));
    }
    let (scenario, base) = match &a.scenario {
        Some(p) => (Scenario::from_path(p).context("--scenario")?, None),
        None => (design_scenario(), Some(design_base_scenario())),
    };

    let population = simulate_population(a.n, &Marginals::survey(), a.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("--out {}", a.out.display()))?;
    write_persons(&population, &a.out.join("persons.csv"))?;
    write_regions(&scenario.region_table(), &a.out.join("regions.csv"))?;
    let scen_dir = a.out.join("scenarios");
    fs::create_dir_all(&scen_dir)?;
    for s in std::iter::once(&scenario).chain(&base) {
        fs::write(scen_dir.join(format!("{}.toml", s.name)), s.to_toml_string())?;
    }

    for (k, (spec, truth)) in specs.iter().enumerate() {
        let sp_trips = per_spec(&a.sp_trips, k).unwrap_or(2);
        let reporting = per_spec(&a.rp_persons, k).unwrap_or(a.n).min(a.n);
        let total = per_spec(&a.rp_total, k).unwrap_or(reporting * a.rp_trips);
        let allocation = rp_allocation(reporting, total);
        let most = allocation.first().copied().unwrap_or(0);
        let (head, tail) = population.split_at(reporting);
        let (mut rp, mut sp) = simulate_choices(
            head,
            &scenario,
            truth,
            spec,
            TripsPerPerson { rp: most, sp: sp_trips },
            spec_seed(a.seed, k),
        )?;
        let (_, sp_rest) = simulate_choices(
            tail,
            &scenario,
            truth,
            spec,
            TripsPerPerson { rp: 0, sp: sp_trips },
            spec_seed(a.seed, k + 50),
        )?;
        sp.observations.extend(sp_rest.observations);
        let keep: BTreeMap<&str, usize> = head.iter().map(|p| p.id.as_str()).zip(allocation.iter().copied()).collect();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        rp.observations.retain(|o| {
            let c = seen.entry(o.person_id.clone()).or_default();
            *c += 1;
            *c <= keep[o.person_id.as_str()]
        });
        let dir = a.out.join(spec.purpose.as_str());
        fs::create_dir_all(&dir)?;
        write_choice_dataset(&rp, &dir.join("rp_trips.csv"))?;
        write_choice_dataset(&sp, &dir.join("sp_choices.csv"))?;
        println!("{}: {} RP and {} SP observations", spec.purpose, rp.len(), sp.len());
    }

    if let Some(path) = &a.tripgen_truth {
        let text = fs::read_to_string(path).with_context(|| format!("--tripgen-truth {}", path.display()))?;
        let fits: BTreeMap<Purpose, _> = parse_tripgen_truth(&text).context("--tripgen-truth")?;
        let counts_scenario = base.as_ref().unwrap_or(&scenario);
        let mut records = Vec::new();
        for (k, (spec, truth)) in specs.iter().enumerate() {
            let Some(fit) = fits.get(&spec.purpose) else {
                warn!("--tripgen-truth has no {} table; no counts drawn for it", spec.purpose);
                continue;
            };
            let model = ForecastModel::new(spec, truth, fit.clone())?;
            let acc: Vec<f64> = accessibility_table(&population, counts_scenario, std::slice::from_ref(&model), 1.0)?
                .into_iter()
                .map(|r| r.accessibility)
                .collect();
            records.extend(simulate_trip_counts(&population, &acc, spec.purpose, fit, spec_seed(a.seed, k + 100))?);
        }
        write_tripgen_records(&records, &a.out.join("tripgen.csv"))?;
        println!("trip counts: {} records", records.len());
    }
    Ok(Status::Success)
}
