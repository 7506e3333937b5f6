//! Joint RP/SP maximum likelihood: objective, gradient, driver, covariance and fit statistics.

use std::collections::BTreeMap;

use log::{debug, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ChoiceDataset;
use crate::engine::{compile_observation, CompiledObservation, Fault};
use crate::error::{Error, Result};
use crate::numeric::{max_abs, normal_two_sided_p, significance_code};
use crate::optim::{hessian, maximize, Objective, OptimOptions, StopReason};
use crate::spec::{unpack_parameters, Layout, ModelSpec, NamedParams, ParamEntry, ParamKind, ParameterVector, Purpose, Scope};

/// How per-observation terms are summed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    /// Fixed-size chunks summed in observation order: identical bits for any thread count.
    #[default]
    Ordered,
    /// Work-stealing reduction; the last bits depend on scheduling.
    Unordered,
}

const CHUNK: usize = 64;

/// The joint log-likelihood over compiled RP and SP observations.
#[derive(Clone, Debug)]
pub struct Problem {
    observations: Vec<CompiledObservation>,
    k: usize,
    pub n_rp: usize,
    pub n_sp: usize,
    pub reduction: Reduction,
    pub fault: Fault,
}

fn check_dataset(dataset: &ChoiceDataset, spec: &ModelSpec, scope: Scope) -> Result<()> {
    if dataset.scope != scope {
        return Err(Error::Validation(format!("expected an {scope} dataset, got {}", dataset.scope)));
    }
    if !dataset.is_empty() && dataset.purpose != spec.purpose {
        return Err(Error::Validation(format!(
            "dataset purpose {} does not match spec purpose {}",
            dataset.purpose, spec.purpose
        )));
    }
    Ok(())
}

impl Problem {
    pub fn new(rp: &ChoiceDataset, sp: &ChoiceDataset, spec: &ModelSpec) -> Result<Self> {
        check_dataset(rp, spec, Scope::Rp)?;
        check_dataset(sp, spec, Scope::Sp)?;
        let observations = rp
            .observations
            .iter()
            .chain(&sp.observations)
            .map(|o| compile_observation(o, spec))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            observations,
            k: spec.num_free(),
            n_rp: rp.len(),
            n_sp: sp.len(),
            reduction: Reduction::Ordered,
            fault: Fault::None,
        })
    }

    pub fn num_params(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observations(&self) -> &[CompiledObservation] {
        &self.observations
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.k {
            return Err(Error::Validation(format!("expected {} parameters, got {}", self.k, theta.len())));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite parameter value".into()));
        }
        Ok(())
    }

    fn zero_probability(&self, theta: &[f64]) -> Error {
        let id = self
            .observations
            .iter()
            .find(|o| !o.loglik(theta).is_finite())
            .map_or("?", |o| o.id.as_str());
        Error::Numerical(format!("zero probability for the chosen alternative of observation `{id}`"))
    }

    pub fn loglik(&self, theta: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        let ll: f64 = match self.reduction {
            Reduction::Ordered => {
                let parts: Vec<f64> = self
                    .observations
                    .par_chunks(CHUNK)
                    .map(|chunk| chunk.iter().map(|o| o.loglik(theta)).sum::<f64>())
                    .collect();
                parts.iter().sum()
            }
            Reduction::Unordered => self.observations.par_iter().map(|o| o.loglik(theta)).sum(),
        };
        if ll.is_finite() {
            Ok(ll)
        } else {
            Err(self.zero_probability(theta))
        }
    }

    pub fn loglik_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_theta(theta)?;
        let k = self.k;
        let fault = self.fault;
        let chunk_sum = |chunk: &[CompiledObservation]| {
            let mut g = vec![0.0; k];
            let ll: f64 = chunk.iter().map(|o| o.loglik_gradient(theta, &mut g, fault)).sum();
            (ll, g)
        };
        let add = |(la, mut ga): (f64, Vec<f64>), (lb, gb): (f64, Vec<f64>)| {
            ga.iter_mut().zip(&gb).for_each(|(a, b)| *a += b);
            (la + lb, ga)
        };
        let (ll, grad) = match self.reduction {
            Reduction::Ordered => {
                let parts: Vec<(f64, Vec<f64>)> = self.observations.par_chunks(CHUNK).map(chunk_sum).collect();
                parts.into_iter().fold((0.0, vec![0.0; k]), add)
            }
            Reduction::Unordered => self
                .observations
                .par_chunks(CHUNK)
                .map(chunk_sum)
                .reduce(|| (0.0, vec![0.0; k]), add),
        };
        if !ll.is_finite() {
            return Err(self.zero_probability(theta));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient component {i}")));
        }
        Ok((ll, grad))
    }
}

/// Largest change of any observation's logsum-link index in one optimizer step.
pub const MAX_LINK_STEP: f64 = 2.0;
/// Largest change of ln μ in one optimizer step.
pub const MAX_SCALE_STEP: f64 = 1.0;

/// The likelihood seen by the optimizer, over the coordinates in `free` with
/// the rest held at `base`. Steps are shortened so no link index can jump into
/// the saturated region of the logistic, where it has no gradient.
struct Likelihood<'a> {
    problem: &'a Problem,
    free: Vec<usize>,
    base: Vec<f64>,
}

impl Likelihood<'_> {
    fn full(&self, x: &[f64]) -> Vec<f64> {
        let mut theta = self.base.clone();
        for (&i, v) in self.free.iter().zip(x) {
            theta[i] = *v;
        }
        theta
    }

    fn restrict(&self, theta: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&i| theta[i]).collect()
    }
}

impl Objective for Likelihood<'_> {
    fn value_gradient(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, g) = self.problem.loglik_gradient(&self.full(x))?;
        Ok((v, self.restrict(&g)))
    }

    fn step_limit(&mut self, _x: &[f64], direction: &[f64]) -> f64 {
        let mut d = vec![0.0; self.base.len()];
        for (&i, v) in self.free.iter().zip(direction) {
            d[i] = *v;
        }
        let obs = &self.problem.observations;
        let link = obs.iter().map(|o| o.link_rate(&d)).fold(0.0, f64::max);
        let scale = obs.iter().find_map(|o| o.scale_index()).map_or(0.0, |i| d[i].abs());
        let mut limit = f64::INFINITY;
        if link > 0.0 {
            limit = limit.min(MAX_LINK_STEP / link);
        }
        if scale > 0.0 {
            limit = limit.min(MAX_SCALE_STEP / scale);
        }
        limit
    }
}

fn theta_of(params: &ParameterVector, spec: &ModelSpec) -> Result<Vec<f64>> {
    if params.layout != *spec.layout() {
        return Err(Error::Validation("parameter layout does not match the spec".into()));
    }
    Ok(params.values.clone())
}

fn empty_like(scope: Scope, spec: &ModelSpec) -> ChoiceDataset {
    ChoiceDataset::empty(scope, spec.purpose)
}

pub fn loglik_rp(rp: &ChoiceDataset, params: &ParameterVector, spec: &ModelSpec) -> Result<f64> {
    Problem::new(rp, &empty_like(Scope::Sp, spec), spec)?.loglik(&theta_of(params, spec)?)
}

pub fn loglik_sp(sp: &ChoiceDataset, params: &ParameterVector, spec: &ModelSpec) -> Result<f64> {
    Problem::new(&empty_like(Scope::Rp, spec), sp, spec)?.loglik(&theta_of(params, spec)?)
}

pub fn loglik_joint(rp: &ChoiceDataset, sp: &ChoiceDataset, params: &ParameterVector, spec: &ModelSpec) -> Result<f64> {
    Problem::new(rp, sp, spec)?.loglik(&theta_of(params, spec)?)
}

/// Analytic gradient of the joint log-likelihood in layout order.
pub fn gradient(rp: &ChoiceDataset, sp: &ChoiceDataset, params: &ParameterVector, spec: &ModelSpec) -> Result<Vec<f64>> {
    Ok(Problem::new(rp, sp, spec)?.loglik_gradient(&theta_of(params, spec)?)?.1)
}

/// Log-likelihood with every free parameter at 0 (μ = 1, λ = 0.5).
pub fn null_loglik(rp: &ChoiceDataset, sp: &ChoiceDataset, spec: &ModelSpec) -> Result<f64> {
    Problem::new(rp, sp, spec)?.loglik(&vec![0.0; spec.num_free()])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub ll0: f64,
    pub rho: f64,
    pub rho_adj: f64,
}

/// ρ = 1 − ll1/ll0 and ρ-adj = 1 − (ll1 − K)/ll0.
pub fn fit_statistics(ll0: f64, ll1: f64, k: usize) -> Result<FitStats> {
    if ll0 == 0.0 || !ll0.is_finite() {
        return Err(Error::Numerical(format!("null log-likelihood {ll0} cannot normalise ρ")));
    }
    Ok(FitStats {
        ll0,
        rho: 1.0 - ll1 / ll0,
        rho_adj: 1.0 - (ll1 - k as f64) / ll0,
    })
}

pub fn fit_stats(ll1: f64, rp: &ChoiceDataset, sp: &ChoiceDataset, spec: &ModelSpec, k: usize) -> Result<FitStats> {
    fit_statistics(null_loglik(rp, sp, spec)?, ll1, k)
}

/// (β_time / β_cost) × 10⁶, in VND per hour when cost is in Mil VND and time in hours.
pub fn value_of_time(params: &NamedParams, time_coef: &str, cost_coef: &str) -> Result<f64> {
    let get = |n: &str| {
        params
            .get(n)
            .copied()
            .ok_or_else(|| Error::Validation(format!("parameter `{n}` missing")))
    };
    let (t, c) = (get(time_coef)?, get(cost_coef)?);
    if c == 0.0 {
        return Err(Error::Numerical(format!("cost coefficient `{cost_coef}` is zero")));
    }
    Ok(t / c * 1e6)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Covariance {
    pub std_errors: Vec<f64>,
    pub matrix: Vec<Vec<f64>>,
}

pub const HESSIAN_STEP: f64 = 1e-5;

/// Inverse of the negated finite-difference Hessian of the analytic gradient.
pub fn covariance(problem: &Problem, theta: &[f64], names: &[String]) -> Result<Covariance> {
    let mut obj = |x: &[f64]| problem.loglik_gradient(x);
    let h = hessian(&mut obj, theta, HESSIAN_STEP)?;
    let n = h.len();
    let info = DMatrix::from_fn(n, n, |i, j| -h[i][j]);
    let Some(chol) = info.clone().cholesky() else {
        return Err(singular(&info, names));
    };
    let cov = chol.inverse();
    let std_errors: Vec<f64> = (0..n).map(|i| cov[(i, i)].sqrt()).collect();
    if std_errors.iter().any(|s| !s.is_finite()) {
        return Err(singular(&info, names));
    }
    Ok(Covariance {
        std_errors,
        matrix: (0..n).map(|i| (0..n).map(|j| cov[(i, j)]).collect()).collect(),
    })
}

fn singular(info: &DMatrix<f64>, names: &[String]) -> Error {
    let n = info.nrows();
    let mut pairs = Vec::new();
    for i in 0..n {
        if info[(i, i)] <= 1e-12 * max_abs(info.as_slice()).max(1.0) {
            pairs.push(format!("{} (no information)", names[i]));
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (info[(i, i)] * info[(j, j)]).sqrt();
            if d > 0.0 && (info[(i, j)] / d).abs() > 0.999 {
                pairs.push(format!("{} ~ {}", names[i], names[j]));
            }
        }
    }
    Error::Singular { pairs }
}

pub fn standard_errors(rp: &ChoiceDataset, sp: &ChoiceDataset, params_hat: &ParameterVector, spec: &ModelSpec) -> Result<Vec<f64>> {
    let problem = Problem::new(rp, sp, spec)?;
    let names: Vec<String> = spec.layout().names().map(String::from).collect();
    Ok(covariance(&problem, &theta_of(params_hat, spec)?, &names)?.std_errors)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationControls {
    pub tol: f64,
    pub max_iter: usize,
    pub reduction: Reduction,
    /// Fit with the logsum-link parameters held at their start values before freeing them.
    #[serde(default = "yes")]
    pub staged_start: bool,
}

fn yes() -> bool {
    true
}

impl Default for EstimationControls {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            reduction: Reduction::Ordered,
            staged_start: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate {
    pub name: String,
    pub kind: ParamKind,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
    pub significance: String,
}

/// μ on its natural scale, with a delta-method standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleEstimate {
    pub parameter: String,
    pub mu: f64,
    pub std_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    pub tolerance: f64,
    pub stop_reason: StopReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub purpose: Purpose,
    pub parameters: Vec<ParameterEstimate>,
    pub scale: Option<ScaleEstimate>,
    pub ll0: f64,
    pub ll1: f64,
    pub rho: f64,
    pub rho_adj: f64,
    pub k: usize,
    pub vot: BTreeMap<String, f64>,
    pub convergence: Convergence,
    pub n_rp: usize,
    pub n_sp: usize,
    pub rp_persons: usize,
    pub sp_persons: usize,
    /// Set when the covariance could not be computed.
    pub covariance_note: Option<String>,
}

impl EstimationResult {
    pub fn estimates(&self) -> ParameterVector {
        let layout = Layout::from(
            self.parameters
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    kind: p.kind,
                })
                .collect::<Vec<_>>(),
        );
        ParameterVector {
            layout,
            values: self.parameters.iter().map(|p| p.estimate).collect(),
        }
    }

    pub fn named(&self) -> NamedParams {
        self.parameters.iter().map(|p| (p.name.clone(), p.estimate)).collect()
    }

    pub fn std_errors(&self) -> Vec<Option<f64>> {
        self.parameters.iter().map(|p| p.std_error).collect()
    }

    pub fn get(&self, name: &str) -> Option<&ParameterEstimate> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

pub fn estimate(
    rp: &ChoiceDataset,
    sp: &ChoiceDataset,
    spec: &ModelSpec,
    start: &ParameterVector,
    controls: &EstimationControls,
) -> Result<EstimationResult> {
    let mut problem = Problem::new(rp, sp, spec)?;
    problem.reduction = controls.reduction;
    let theta0 = theta_of(start, spec)?;
    if problem.is_empty() {
        return Err(Error::Data("no observations to estimate from".into()));
    }
    let opts = OptimOptions {
        tol: controls.tol,
        max_iter: controls.max_iter,
        ..OptimOptions::default()
    };
    let mut iterations = 0;
    let mut theta_start = theta0;
    let link: Vec<usize> = (0..spec.num_free())
        .filter(|&i| spec.layout().entries()[i].kind == ParamKind::LambdaLink)
        .collect();
    // Staging is for uninformed starts; a start with link values is trusted as given.
    if controls.staged_start && !link.is_empty() && link.iter().all(|&i| theta_start[i] == 0.0) {
        let mut stage = Likelihood {
            problem: &problem,
            free: (0..spec.num_free()).filter(|i| !link.contains(i)).collect(),
            base: theta_start.clone(),
        };
        let x0 = stage.restrict(&theta_start);
        let first = maximize(&mut stage, &x0, &opts)?;
        debug!("first stage (link held fixed): {} iterations, ll {}", first.iterations, first.value);
        iterations += first.iterations;
        theta_start = stage.full(&first.x);
    }
    let mut full = Likelihood {
        problem: &problem,
        free: (0..spec.num_free()).collect(),
        base: theta_start.clone(),
    };
    let opts = OptimOptions {
        max_iter: controls.max_iter.saturating_sub(iterations),
        ..opts
    };
    let mut outcome = maximize(&mut full, &theta_start, &opts)?;
    outcome.iterations += iterations;
    debug!(
        "optimizer stopped after {} iterations: {} (ll {})",
        outcome.iterations, outcome.stop_reason, outcome.value
    );
    let ll1 = outcome.value;
    let ll0 = problem.loglik(&vec![0.0; problem.num_params()])?;
    let k = spec.num_free();
    let stats = fit_statistics(ll0, ll1, k)?;

    let names: Vec<String> = spec.layout().names().map(String::from).collect();
    let (std_errors, covariance_note) = match covariance(&problem, &outcome.x, &names) {
        Ok(c) => (c.std_errors.into_iter().map(Some).collect(), None),
        Err(e) => {
            warn!("standard errors unavailable: {e}");
            (vec![None; k], Some(e.to_string()))
        }
    };
    let parameters: Vec<ParameterEstimate> = spec
        .layout()
        .entries()
        .iter()
        .zip(&outcome.x)
        .zip(&std_errors)
        .map(|((entry, &est), se)| {
            let z = se.filter(|s| *s > 0.0).map(|s| est / s);
            let p = z.map(normal_two_sided_p);
            ParameterEstimate {
                name: entry.name.clone(),
                kind: entry.kind,
                estimate: est,
                std_error: *se,
                z,
                p_value: p,
                significance: p.map_or(String::new(), |p| significance_code(p).trim().to_string()),
            }
        })
        .collect();
    let scale = spec.scale.as_ref().map(|name| {
        let i = spec.layout().index_of(name).expect("scale is in the layout");
        let mu = outcome.x[i].exp();
        ScaleEstimate {
            parameter: name.clone(),
            mu,
            std_error: std_errors[i].map(|s| mu * s),
        }
    });
    let named = unpack_parameters(
        &ParameterVector {
            layout: spec.layout().clone(),
            values: outcome.x.clone(),
        },
        spec,
    )?;
    let mut vot = BTreeMap::new();
    for def in &spec.vot {
        match value_of_time(&named, &def.time_coefficient, &def.cost_coefficient) {
            Ok(v) => {
                vot.insert(def.label.clone(), v);
            }
            Err(e) => warn!("value of time `{}` unavailable: {e}", def.label),
        }
    }
    Ok(EstimationResult {
        purpose: spec.purpose,
        parameters,
        scale,
        ll0,
        ll1,
        rho: stats.rho,
        rho_adj: stats.rho_adj,
        k,
        vot,
        convergence: Convergence {
            iterations: outcome.iterations,
            converged: outcome.converged,
            gradient_norm: max_abs(&outcome.gradient),
            tolerance: controls.tol,
            stop_reason: outcome.stop_reason,
        },
        n_rp: rp.len(),
        n_sp: sp.len(),
        rp_persons: rp.num_persons(),
        sp_persons: sp.num_persons(),
        covariance_note,
    })
}
