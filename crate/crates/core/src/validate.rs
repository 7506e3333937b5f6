//! Numerical self-checks: analytic gradient against central differences and
//! engine probabilities against brute-force enumeration, at random parameter points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ChoiceDataset;
use crate::engine::{evaluate_observation, Fault};
use crate::error::{Error, Result};
use crate::estimation::Problem;
use crate::spec::{pack_parameters, unpack_parameters, ModelSpec, NamedParams, ParamKind, ParameterVector};
use crate::synth::{bruteforce_prob, BRUTEFORCE_MAX_LEAVES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationOptions {
    pub points: usize,
    pub seed: u64,
    /// Central-difference step relative to max(|θ_j|, 1).
    pub fd_step: f64,
    /// Allowed |analytic − numeric| / max(|analytic|, |numeric|, 1).
    pub gradient_tol: f64,
    /// Allowed absolute probability difference against enumeration.
    pub oracle_tol: f64,
    /// Observations enumerated per point, cycling through the data.
    pub oracle_per_point: usize,
    /// Each utility or link term contributes at most this much at a random point.
    pub term_spread: f64,
    /// Half-width of the ln μ draw.
    pub log_scale_spread: f64,
    #[serde(skip)]
    pub fault: Fault,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            points: 100,
            seed: 1,
            fd_step: 1e-6,
            gradient_tol: 1e-6,
            oracle_tol: 1e-10,
            oracle_per_point: 50,
            term_spread: 1.0,
            log_scale_spread: 1.6,
            fault: Fault::None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Gradient,
    Oracle,
}

/// Everything needed to replay one failed check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailingPoint {
    pub check: Check,
    pub point: usize,
    /// Free-space parameter values (ln μ for the scale).
    pub parameters: NamedParams,
    /// Parameter name for gradient checks, observation id for oracle checks.
    pub location: String,
    pub computed: f64,
    pub reference: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Worst {
    pub error: f64,
    pub point: usize,
    pub location: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub points: usize,
    pub observations: usize,
    pub gradient: Option<Worst>,
    pub oracle: Option<Worst>,
    pub oracle_checked: usize,
    /// Observations too large to enumerate, or whose direct weights overflow.
    pub oracle_skipped: usize,
    pub failures: Vec<FailingPoint>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn worst_gradient_error(&self) -> f64 {
        self.gradient.as_ref().map_or(0.0, |w| w.error)
    }

    pub fn worst_oracle_error(&self) -> f64 {
        self.oracle.as_ref().map_or(0.0, |w| w.error)
    }
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central differences of the log-likelihood, formed per observation and then
/// summed so rounding stays at the scale of a single term.
pub fn numeric_gradient(problem: &Problem, theta: &[f64], rel_step: f64) -> Vec<f64> {
    let k = theta.len();
    let parts: Vec<Vec<f64>> = problem
        .observations()
        .par_chunks(64)
        .map(|chunk| {
            let mut g = vec![0.0; k];
            let mut x = theta.to_vec();
            for o in chunk {
                for j in 0..k {
                    let h = rel_step * theta[j].abs().max(1.0);
                    x[j] = theta[j] + h;
                    let up = o.loglik(&x);
                    x[j] = theta[j] - h;
                    let down = o.loglik(&x);
                    x[j] = theta[j];
                    g[j] += (up - down) / (2.0 * h);
                }
            }
            g
        })
        .collect();
    parts.into_iter().fold(vec![0.0; k], |mut acc, g| {
        acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        acc
    })
}

/// A random free vector where every term moves its utility or link index by at most `term_spread`.
pub fn random_point(problem: &Problem, spec: &ModelSpec, opts: &ValidationOptions, rng: &mut ChaCha8Rng) -> ParameterVector {
    let k = spec.num_free();
    let mut mag = vec![0.0; k];
    for o in problem.observations() {
        o.accumulate_magnitudes(&mut mag);
    }
    let values = spec
        .layout()
        .entries()
        .iter()
        .zip(&mag)
        .map(|(e, m)| {
            let u: f64 = rng.gen_range(-1.0..1.0);
            match e.kind {
                ParamKind::LogScale => u * opts.log_scale_spread,
                _ => u * opts.term_spread / if *m > 0.0 { *m } else { 1.0 },
            }
        })
        .collect();
    ParameterVector::from_values(spec.layout(), values).expect("layout-sized vector")
}

/// Runs both checks at `opts.points` random points, or at the given points.
pub fn validate(
    rp: &ChoiceDataset,
    sp: &ChoiceDataset,
    spec: &ModelSpec,
    opts: &ValidationOptions,
    fixed_points: Option<&[NamedParams]>,
) -> Result<ValidationReport> {
    let mut problem = Problem::new(rp, sp, spec)?;
    problem.fault = opts.fault;
    if problem.is_empty() {
        return Err(Error::Data("no observations to validate against".into()));
    }
    let points: Vec<ParameterVector> = match fixed_points {
        Some(ps) => ps.iter().map(|p| pack_parameters(spec, p)).collect::<Result<_>>()?,
        None => {
            if opts.points == 0 {
                return Err(Error::Config("at least one validation point is required".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            (0..opts.points).map(|_| random_point(&problem, spec, opts, &mut rng)).collect()
        }
    };
    let all: Vec<_> = rp.observations.iter().chain(&sp.observations).collect();
    let names: Vec<String> = spec.layout().names().map(String::from).collect();
    let mut report = ValidationReport {
        points: points.len(),
        observations: all.len(),
        gradient: None,
        oracle: None,
        oracle_checked: 0,
        oracle_skipped: 0,
        failures: Vec::new(),
    };
    let mut cursor = 0usize;
    for (p, point) in points.iter().enumerate() {
        let named = unpack_parameters(point, spec)?;
        let fail = |check, location: String, computed, reference, error| FailingPoint {
            check,
            point: p,
            parameters: named.clone(),
            location,
            computed,
            reference,
            error,
        };

        let (_, analytic) = problem.loglik_gradient(&point.values)?;
        let numeric = numeric_gradient(&problem, &point.values, opts.fd_step);
        for (j, (a, f)) in analytic.iter().zip(&numeric).enumerate() {
            let e = relative_error(*a, *f);
            if report.gradient.as_ref().map_or(true, |w| e > w.error) {
                report.gradient = Some(Worst {
                    error: e,
                    point: p,
                    location: names[j].clone(),
                });
            }
            if !(e <= opts.gradient_tol) {
                report.failures.push(fail(Check::Gradient, names[j].clone(), *a, *f, e));
            }
        }

        for _ in 0..opts.oracle_per_point.min(all.len()) {
            let obs = all[cursor % all.len()];
            cursor += 1;
            if obs.num_leaves() > BRUTEFORCE_MAX_LEAVES {
                report.oracle_skipped += 1;
                continue;
            }
            let table = match bruteforce_prob(obs, &named, spec) {
                Ok(t) => t,
                Err(Error::Numerical(_)) => {
                    report.oracle_skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let eval = evaluate_observation(obs, point, spec)?;
            report.oracle_checked += 1;
            let mut worst: (f64, f64, f64) = (0.0, 0.0, 0.0);
            for (d, row) in table.iter().enumerate() {
                for (a, b) in row.iter().enumerate() {
                    let e = (eval.joint(d, a) - b).abs();
                    if !(e <= worst.0) {
                        worst = (e, eval.joint(d, a), *b);
                    }
                }
            }
            if report.oracle.as_ref().map_or(true, |w| worst.0 > w.error) {
                report.oracle = Some(Worst {
                    error: worst.0,
                    point: p,
                    location: obs.id.clone(),
                });
            }
            if !(worst.0 <= opts.oracle_tol) {
                report.failures.push(fail(Check::Oracle, obs.id.clone(), worst.1, worst.2, worst.0));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::Purpose;
    use crate::synth::{design_scenario, reference_truth, simulate_choices, simulate_population, Marginals, TripsPerPerson};

    fn data(spec: &ModelSpec, purpose: Purpose) -> (ChoiceDataset, ChoiceDataset) {
        let pop = simulate_population(15, &Marginals::survey(), 4).unwrap();
        let mut s = design_scenario();
        s.regions.truncate(4);
        s.level_of_service.retain(|(r, _), _| *r <= 4);
        simulate_choices(&pop, &s, &reference_truth(purpose), spec, TripsPerPerson { rp: 1, sp: 2 }, 4).unwrap()
    }

    #[test]
    fn healthy_engine_passes() {
        for (spec, p) in [
            (ModelSpec::business_reference(), Purpose::Business),
            (ModelSpec::non_business_reference(), Purpose::NonBusiness),
        ] {
            let (rp, sp) = data(&spec, p);
            let opts = ValidationOptions {
                points: 5,
                ..Default::default()
            };
            let r = validate(&rp, &sp, &spec, &opts, None).unwrap();
            assert!(r.passed(), "{:?}", r.failures.first());
            assert!(r.worst_gradient_error() < 1e-6);
            assert!(r.oracle_checked > 0);
        }
    }

    #[test]
    fn injected_sign_bug_is_caught() {
        let spec = ModelSpec::non_business_reference();
        let (rp, sp) = data(&spec, Purpose::NonBusiness);
        let opts = ValidationOptions {
            points: 2,
            fault: Fault::LambdaSign,
            ..Default::default()
        };
        let r = validate(&rp, &sp, &spec, &opts, None).unwrap();
        assert!(!r.passed());
        let f = &r.failures[0];
        assert_eq!(f.check, Check::Gradient);
        assert!(f.location.starts_with("w_"), "{}", f.location);
        let replay = validate(&rp, &sp, &spec, &opts, Some(std::slice::from_ref(&f.parameters))).unwrap();
        assert!(!replay.passed());
    }

    #[test]
    fn zero_points_is_a_usage_error() {
        let spec = ModelSpec::business_reference();
        let (rp, sp) = data(&spec, Purpose::Business);
        let opts = ValidationOptions {
            points: 0,
            ..Default::default()
        };
        assert!(matches!(validate(&rp, &sp, &spec, &opts, None), Err(Error::Config(_))));
    }
}
