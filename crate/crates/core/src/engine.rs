//! Utilities, logsum parameters and nested-logit probabilities.

use crate::data::{ChoiceObservation, STATE_DEPENDENCE_KEY};
use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, logistic, softmax_into};
use crate::spec::{AttributeSource, Mode, ModelSpec, NamedParams, ParameterVector, RegionId, Scope, UtilityTerm};

/// Logistic link for the logsum parameter.
pub fn lambda_link(omega: &[f64], k: &[f64]) -> Result<f64> {
    if omega.len() != k.len() {
        return Err(Error::Validation(format!(
            "link has {} coefficients but {} covariates",
            omega.len(),
            k.len()
        )));
    }
    let mut x = 0.0;
    for (w, v) in omega.iter().zip(k) {
        if !v.is_finite() || !w.is_finite() {
            return Err(Error::Numerical("non-finite link covariate or coefficient".into()));
        }
        x += w * v;
    }
    Ok(link(x))
}

/// Logistic clamped to the open unit interval: at |x| > 37 the logistic rounds to 0 or 1.
fn link(x: f64) -> f64 {
    logistic(x).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// ln Σ exp(V/λ).
pub fn logsum(utilities: &[f64], lambda: f64) -> Result<f64> {
    if utilities.is_empty() {
        return Err(Error::Validation("logsum of an empty nest".into()));
    }
    check_lambda(lambda)?;
    let scaled: Vec<f64> = utilities.iter().map(|v| v / lambda).collect();
    Ok(log_sum_exp(&scaled))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda <= 1.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("logsum parameter {lambda} outside (0, 1]")))
    }
}

pub fn conditional_mode_prob(utilities: &[(Mode, f64)], lambda: f64, mode: Mode) -> Result<f64> {
    let pos = utilities
        .iter()
        .position(|(m, _)| *m == mode)
        .ok_or_else(|| Error::Validation(format!("mode {mode} is not in the nest")))?;
    let values: Vec<f64> = utilities.iter().map(|(_, v)| *v).collect();
    let lse = logsum(&values, lambda)?;
    Ok((values[pos] / lambda - lse).exp())
}

/// Softmax over V_d = C_d + λ_d Γ_d.
pub fn marginal_destination_prob(
    dest_utilities: &[(RegionId, f64)],
    nest_logsums: &[f64],
    lambdas: &[f64],
    destination: RegionId,
) -> Result<f64> {
    let n = dest_utilities.len();
    if nest_logsums.len() != n || lambdas.len() != n {
        return Err(Error::Validation(format!(
            "dimension mismatch: {n} destinations, {} logsums, {} lambdas",
            nest_logsums.len(),
            lambdas.len()
        )));
    }
    let pos = dest_utilities
        .iter()
        .position(|(r, _)| *r == destination)
        .ok_or_else(|| Error::Validation(format!("destination {destination} is not in the set")))?;
    let w: Vec<f64> = (0..n)
        .map(|d| dest_utilities[d].1 + lambdas[d] * nest_logsums[d])
        .collect();
    Ok((w[pos] - log_sum_exp(&w)).exp())
}

/// Evaluation context for one observation under named parameter values.
pub struct UtilityContext<'a> {
    pub observation: &'a ChoiceObservation,
    pub params: &'a NamedParams,
    pub scope: Scope,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alternative {
    Mode(RegionId, Mode),
    Destination(RegionId),
}

/// Value a term contributes to the nest/alternative, or `None` when it does not apply.
fn term_value(
    term: &UtilityTerm,
    obs: &ChoiceObservation,
    nest: usize,
    alt: Option<usize>,
    scope: Scope,
) -> Result<Option<f64>> {
    if !term.scope.includes(scope) {
        return Ok(None);
    }
    let n = &obs.nests[nest];
    let (applies, attrs, label) = match alt {
        Some(a) => {
            let leaf = &n.alternatives[a];
            (
                term.applies_to.mode(leaf.mode),
                &leaf.attributes,
                format!("{} in region {}", leaf.mode, n.region),
            )
        }
        None => (term.applies_to.region(n.region), &n.attributes, format!("region {}", n.region)),
    };
    if !applies {
        return Ok(None);
    }
    let missing = |what: &str| {
        Error::Data(format!(
            "observation `{}`: coefficient `{}` needs `{what}` on {label}",
            obs.id, term.coefficient
        ))
    };
    let covariate = |name: &str| obs.covariates.get(name).copied().ok_or_else(|| missing(name));
    let value = match &term.source {
        AttributeSource::Constant => 1.0,
        AttributeSource::Alternative(a) => *attrs.get(a).ok_or_else(|| missing(a))?,
        AttributeSource::Person(p) => covariate(p)?,
        AttributeSource::Interaction { person, alternative } => {
            covariate(person)? * *attrs.get(alternative).ok_or_else(|| missing(alternative))?
        }
        AttributeSource::StateDependence => *attrs.get(STATE_DEPENDENCE_KEY).ok_or_else(|| missing(STATE_DEPENDENCE_KEY))?,
    };
    if !value.is_finite() {
        return Err(Error::Data(format!(
            "observation `{}`: coefficient `{}` has a non-finite value on {label}",
            obs.id, term.coefficient
        )));
    }
    Ok(Some(value))
}

fn locate(obs: &ChoiceObservation, alternative: Alternative) -> Result<(usize, Option<usize>)> {
    let region = match alternative {
        Alternative::Mode(r, _) | Alternative::Destination(r) => r,
    };
    let nest = obs
        .nests
        .iter()
        .position(|n| n.region == region)
        .ok_or_else(|| Error::Validation(format!("observation `{}` has no destination {region}", obs.id)))?;
    match alternative {
        Alternative::Destination(_) => Ok((nest, None)),
        Alternative::Mode(_, m) => {
            let alt = obs.nests[nest]
                .alternatives
                .iter()
                .position(|a| a.mode == m)
                .ok_or_else(|| Error::Validation(format!("observation `{}` has no {m} at region {region}", obs.id)))?;
            Ok((nest, Some(alt)))
        }
    }
}

fn natural_scale(spec: &ModelSpec, params: &NamedParams, scope: Scope) -> Result<f64> {
    match (&spec.scale, scope) {
        (Some(name), Scope::Sp) => params
            .get(name)
            .map(|v| v.exp())
            .ok_or_else(|| Error::Validation(format!("parameter `{name}` missing"))),
        _ => Ok(1.0),
    }
}

/// Linear-in-parameters utility. Mode utilities under SP scope carry the scale μ;
/// destination utilities exclude the nest logsum term.
pub fn systematic_utility(ctx: &UtilityContext, spec: &ModelSpec, alternative: Alternative) -> Result<f64> {
    let (nest, alt) = locate(ctx.observation, alternative)?;
    let terms = if alt.is_some() { &spec.mode_terms } else { &spec.destination_terms };
    let mut v = 0.0;
    for term in terms {
        if let Some(x) = term_value(term, ctx.observation, nest, alt, ctx.scope)? {
            let coef = ctx.params.get(&term.coefficient).ok_or_else(|| {
                Error::Validation(format!("parameter `{}` missing", term.coefficient))
            })?;
            v += coef * x;
        }
    }
    if alt.is_some() {
        v *= natural_scale(spec, ctx.params, ctx.scope)?;
    }
    Ok(v)
}

/// The individual logsum parameter for an observation, or 1 for a mode-only structure.
pub fn observation_lambda(obs: &ChoiceObservation, params: &NamedParams, spec: &ModelSpec) -> Result<f64> {
    if !spec.is_nested(obs.scope) {
        return Ok(1.0);
    }
    let mut omega = Vec::new();
    let mut k = Vec::new();
    for t in spec.lambda_terms.iter().filter(|t| t.scope.includes(obs.scope)) {
        omega.push(*params.get(&t.coefficient).ok_or_else(|| Error::Validation(format!("parameter `{}` missing", t.coefficient)))?);
        k.push(*obs.covariates.get(&t.covariate_key()).ok_or_else(|| {
            Error::Data(format!("observation `{}`: link covariate `{}` missing", obs.id, t.covariate_key()))
        })?);
    }
    lambda_link(&omega, &k)
}

/// Probabilities of one observation's choice tree.
#[derive(Clone, Debug, PartialEq)]
pub struct NestEvaluation {
    pub lambda: f64,
    /// Γ_d per destination.
    pub logsums: Vec<f64>,
    /// P(m | d) per destination, in alternative order.
    pub conditional_probs: Vec<Vec<f64>>,
    pub marginal_probs: Vec<f64>,
    /// C_d + λΓ_d per destination.
    pub destination_utilities: Vec<f64>,
}

impl NestEvaluation {
    pub fn joint(&self, nest: usize, alt: usize) -> f64 {
        self.marginal_probs[nest] * self.conditional_probs[nest][alt]
    }
}

fn to_vector(params: &ParameterVector, spec: &ModelSpec) -> Result<Vec<f64>> {
    if params.layout != *spec.layout() {
        return Err(Error::Validation("parameter layout does not match the spec".into()));
    }
    Ok(params.values.clone())
}

pub fn evaluate_observation(obs: &ChoiceObservation, params: &ParameterVector, spec: &ModelSpec) -> Result<NestEvaluation> {
    let theta = to_vector(params, spec)?;
    Ok(compile_observation(obs, spec)?.evaluate(&theta))
}

/// P(chosen destination, chosen mode).
pub fn joint_prob(obs: &ChoiceObservation, params: &ParameterVector, spec: &ModelSpec) -> Result<f64> {
    let eval = evaluate_observation(obs, params, spec)?;
    Ok(eval.joint(obs.chosen_nest, obs.chosen_alt))
}

type Sparse = Vec<(usize, f64)>;

#[derive(Clone, Debug)]
struct CompiledNest {
    destination: Sparse,
    leaves: Vec<Sparse>,
}

/// An observation reduced to sparse (parameter index, value) lists.
#[derive(Clone, Debug)]
pub struct CompiledObservation {
    pub id: String,
    nested: bool,
    scale: Option<usize>,
    lambda: Sparse,
    nests: Vec<CompiledNest>,
    chosen_nest: usize,
    chosen_alt: usize,
}

/// Deliberate gradient defects used to prove the validation harness detects them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Flips the sign of the logsum-parameter chain term.
    LambdaSign,
}

pub fn compile_observation(obs: &ChoiceObservation, spec: &ModelSpec) -> Result<CompiledObservation> {
    let layout = spec.layout();
    let idx = |name: &str| layout.index_of(name).expect("layout covers every spec coefficient");
    let nested = spec.is_nested(obs.scope);
    if obs.nests.is_empty() || obs.nests.iter().any(|n| n.alternatives.is_empty()) {
        return Err(Error::Data(format!("observation `{}` has an empty choice set", obs.id)));
    }
    if !nested && obs.nests.len() != 1 {
        return Err(Error::Data(format!(
            "observation `{}`: mode-only structure needs one destination, found {}",
            obs.id,
            obs.nests.len()
        )));
    }
    if obs.chosen_nest >= obs.nests.len() || obs.chosen_alt >= obs.nests[obs.chosen_nest].alternatives.len() {
        return Err(Error::Data(format!("observation `{}`: chosen alternative out of range", obs.id)));
    }
    let mut nests = Vec::with_capacity(obs.nests.len());
    for (d, nest) in obs.nests.iter().enumerate() {
        let mut destination = Sparse::new();
        if nested {
            for term in &spec.destination_terms {
                if let Some(x) = term_value(term, obs, d, None, obs.scope)? {
                    destination.push((idx(&term.coefficient), x));
                }
            }
        }
        let mut leaves = Vec::with_capacity(nest.alternatives.len());
        for a in 0..nest.alternatives.len() {
            let mut leaf = Sparse::new();
            for term in &spec.mode_terms {
                if let Some(x) = term_value(term, obs, d, Some(a), obs.scope)? {
                    leaf.push((idx(&term.coefficient), x));
                }
            }
            leaves.push(leaf);
        }
        nests.push(CompiledNest { destination, leaves });
    }
    let mut lambda = Sparse::new();
    if nested {
        for t in spec.lambda_terms.iter().filter(|t| t.scope.includes(obs.scope)) {
            let key = t.covariate_key();
            let k = *obs.covariates.get(&key).ok_or_else(|| {
                Error::Data(format!("observation `{}`: link covariate `{key}` missing", obs.id))
            })?;
            lambda.push((idx(&t.coefficient), k));
        }
    }
    let scale = match obs.scope {
        Scope::Sp => spec.scale.as_deref().map(idx),
        Scope::Rp => None,
    };
    Ok(CompiledObservation {
        id: obs.id.clone(),
        nested,
        scale,
        lambda,
        nests,
        chosen_nest: obs.chosen_nest,
        chosen_alt: obs.chosen_alt,
    })
}

fn dot(sparse: &Sparse, theta: &[f64]) -> f64 {
    sparse.iter().map(|(i, x)| theta[*i] * x).sum()
}

struct Tree {
    lambda: f64,
    scale: f64,
    v: Vec<Vec<f64>>,
    logsums: Vec<f64>,
    cond: Vec<Vec<f64>>,
    marg: Vec<f64>,
    log_marg: Vec<f64>,
    w: Vec<f64>,
}

impl CompiledObservation {
    pub fn num_leaves(&self) -> usize {
        self.nests.iter().map(|n| n.leaves.len()).sum()
    }

    /// Change of the logsum-link index per unit step along `direction`.
    pub fn link_rate(&self, direction: &[f64]) -> f64 {
        if self.nested {
            dot(&self.lambda, direction).abs()
        } else {
            0.0
        }
    }

    pub fn scale_index(&self) -> Option<usize> {
        self.scale
    }

    /// Raises `out[j]` to the largest |x| multiplying parameter `j` anywhere in the tree.
    pub fn accumulate_magnitudes(&self, out: &mut [f64]) {
        let mut take = |s: &Sparse| {
            for (i, x) in s {
                out[*i] = out[*i].max(x.abs());
            }
        };
        take(&self.lambda);
        for n in &self.nests {
            take(&n.destination);
            n.leaves.iter().for_each(&mut take);
        }
    }

    fn tree(&self, theta: &[f64]) -> Tree {
        let lambda = if self.nested { link(dot(&self.lambda, theta)) } else { 1.0 };
        let scale = self.scale.map_or(1.0, |i| theta[i].exp());
        let mut v = Vec::with_capacity(self.nests.len());
        let mut logsums = Vec::with_capacity(self.nests.len());
        let mut cond = Vec::with_capacity(self.nests.len());
        let mut w = Vec::with_capacity(self.nests.len());
        let mut scaled = Vec::new();
        for nest in &self.nests {
            let vd: Vec<f64> = nest.leaves.iter().map(|l| scale * dot(l, theta)).collect();
            scaled.clear();
            scaled.extend(vd.iter().map(|x| x / lambda));
            let mut q = Vec::new();
            let gamma = softmax_into(&scaled, &mut q);
            let c = if self.nested { dot(&nest.destination, theta) } else { 0.0 };
            w.push(c + lambda * gamma);
            logsums.push(gamma);
            cond.push(q);
            v.push(vd);
        }
        let mut marg = Vec::new();
        let norm = softmax_into(&w, &mut marg);
        let log_marg = w.iter().map(|x| x - norm).collect();
        Tree {
            lambda,
            scale,
            v,
            logsums,
            cond,
            marg,
            log_marg,
            w,
        }
    }

    pub fn evaluate(&self, theta: &[f64]) -> NestEvaluation {
        let t = self.tree(theta);
        NestEvaluation {
            lambda: t.lambda,
            logsums: t.logsums,
            conditional_probs: t.cond,
            marginal_probs: t.marg,
            destination_utilities: t.w,
        }
    }

    /// Log-probability of the chosen leaf.
    pub fn loglik(&self, theta: &[f64]) -> f64 {
        let t = self.tree(theta);
        let (d, m) = (self.chosen_nest, self.chosen_alt);
        t.v[d][m] / t.lambda - t.logsums[d] + t.log_marg[d]
    }

    /// Log-probability of the chosen leaf; adds its gradient into `grad`.
    pub fn loglik_gradient(&self, theta: &[f64], grad: &mut [f64], fault: Fault) -> f64 {
        let t = self.tree(theta);
        let (ds, ms) = (self.chosen_nest, self.chosen_alt);
        let lambda = t.lambda;
        let ll = t.v[ds][ms] / lambda - t.logsums[ds] + t.log_marg[ds];

        // dLL/dV for every leaf, accumulated into parameter space through x and the scale.
        let mut d_scale = 0.0;
        let mut d_lambda = 0.0;
        for (d, nest) in self.nests.iter().enumerate() {
            let pd = t.marg[d];
            let chosen_nest = d == ds;
            let mut vbar = 0.0;
            for (m, leaf) in nest.leaves.iter().enumerate() {
                let q = t.cond[d][m];
                vbar += q * t.v[d][m];
                let mut g = -pd * q;
                if chosen_nest {
                    g += q - q / lambda;
                    if m == ms {
                        g += 1.0 / lambda;
                    }
                }
                if g != 0.0 {
                    for (i, x) in leaf {
                        grad[*i] += g * t.scale * x;
                    }
                    d_scale += g * t.v[d][m];
                }
            }
            if self.nested {
                let dw = t.logsums[d] - vbar / lambda;
                let coef = f64::from(u8::from(chosen_nest)) - pd;
                for (i, x) in &nest.destination {
                    grad[*i] += coef * x;
                }
                d_lambda -= pd * dw;
                if chosen_nest {
                    d_lambda += dw + (vbar - t.v[ds][ms]) / (lambda * lambda);
                }
            }
        }
        if let Some(i) = self.scale {
            grad[i] += d_scale;
        }
        if self.nested {
            let mut chain = lambda * (1.0 - lambda) * d_lambda;
            if fault == Fault::LambdaSign {
                chain = -chain;
            }
            for (i, k) in &self.lambda {
                grad[*i] += chain * k;
            }
        }
        ll
    }
}
