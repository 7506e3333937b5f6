//! Trip-frequency regressions: least squares for non-business trips, negative binomial for business trips.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::data::{Attributes, Columns, CsvFile, PersonTable};
use crate::error::{Error, Result};
use crate::numeric::{max_abs, normal_two_sided_p, significance_code};
use crate::optim::{hessian, maximize, OptimOptions};
use crate::spec::Purpose;

pub const INTERCEPT: &str = "(Intercept)";

#[derive(Clone, Debug, PartialEq)]
pub struct TripGenRecord {
    pub person_id: String,
    pub purpose: Purpose,
    pub annual_trip_count: u32,
    /// Person attributes plus `accessibility`.
    pub covariates: Attributes,
}

pub const TRIPGEN_COLUMNS: &[&str] = &["person_id", "purpose", "annual_trip_count", "accessibility"];

/// Reads trip counts and accessibility, joined with person attributes.
pub fn load_tripgen_records(path: &Path, persons: &PersonTable) -> Result<Vec<TripGenRecord>> {
    let mut file = CsvFile::open(path)?;
    let cols = Columns::resolve(&file, TRIPGEN_COLUMNS, &[])?;
    let mut out = Vec::new();
    while let Some(rec) = file.next_record()? {
        let person_id = rec.text(&cols, "person_id")?.to_string();
        let person = persons
            .get(&person_id)
            .ok_or_else(|| rec.error(format!("unknown person `{person_id}`")))?;
        let count: u32 = rec.parse(&cols, "annual_trip_count")?;
        let mut covariates = person.attributes();
        covariates.insert("accessibility".into(), rec.number(&cols, "accessibility")?);
        out.push(TripGenRecord {
            person_id,
            purpose: rec.parse(&cols, "purpose")?,
            annual_trip_count: count,
            covariates,
        });
    }
    Ok(out)
}

pub fn write_tripgen_records(records: &[TripGenRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::load(path, None, e.to_string()))?;
    let io = |e: csv::Error| Error::load(path, None, e.to_string());
    w.write_record(TRIPGEN_COLUMNS).map_err(io)?;
    for r in records {
        w.write_record([
            r.person_id.clone(),
            r.purpose.to_string(),
            r.annual_trip_count.to_string(),
            r.covariates.get("accessibility").copied().unwrap_or(f64::NAN).to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterceptMode {
    Free,
    FixedZero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum RegressionModel {
    Linear { intercept: InterceptMode },
    NegativeBinomial,
    Poisson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    /// t for linear fits, z for count fits.
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub significance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub model: RegressionModel,
    pub coefficients: Vec<Coefficient>,
    pub n: usize,
    pub r2: Option<f64>,
    pub adj_r2: Option<f64>,
    /// Residual standard error of a linear fit.
    pub sigma: Option<f64>,
    pub theta: Option<f64>,
    pub theta_std_error: Option<f64>,
    pub theta_fixed: bool,
    pub two_loglik: Option<f64>,
    pub null_deviance: Option<f64>,
    pub residual_deviance: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl RegressionFit {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.coefficients.iter().find(|c| c.name == name).map(|c| c.estimate)
    }

    pub fn covariate_names(&self) -> impl Iterator<Item = &str> {
        self.coefficients.iter().map(|c| c.name.as_str()).filter(|n| *n != INTERCEPT)
    }

    /// x′δ for the given covariates.
    pub fn linear_predictor(&self, covariates: &Attributes) -> Result<f64> {
        let mut eta = 0.0;
        for c in &self.coefficients {
            let x = if c.name == INTERCEPT {
                1.0
            } else {
                *covariates
                    .get(&c.name)
                    .ok_or_else(|| Error::Validation(format!("covariate `{}` missing for trip prediction", c.name)))?
            };
            eta += c.estimate * x;
        }
        Ok(eta)
    }
}

/// Builds a fit from plain coefficients, for prediction with published or external values.
pub fn fit_from_coefficients(model: RegressionModel, coefficients: &[(&str, f64)]) -> RegressionFit {
    RegressionFit {
        model,
        coefficients: coefficients
            .iter()
            .map(|(n, v)| Coefficient {
                name: n.to_string(),
                estimate: *v,
                std_error: None,
                statistic: None,
                p_value: None,
                significance: String::new(),
            })
            .collect(),
        n: 0,
        r2: None,
        adj_r2: None,
        sigma: None,
        theta: None,
        theta_std_error: None,
        theta_fixed: false,
        two_loglik: None,
        null_deviance: None,
        residual_deviance: None,
        converged: true,
        iterations: 0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripPrediction {
    pub trips: f64,
    /// A negative linear prediction was raised to zero.
    pub floored: bool,
}

pub fn predict_trips(fit: &RegressionFit, covariates: &Attributes) -> Result<TripPrediction> {
    let eta = fit.linear_predictor(covariates)?;
    Ok(match fit.model {
        RegressionModel::Linear { .. } => TripPrediction {
            trips: eta.max(0.0),
            floored: eta < 0.0,
        },
        RegressionModel::NegativeBinomial | RegressionModel::Poisson => TripPrediction {
            trips: eta.exp(),
            floored: false,
        },
    })
}

struct Design {
    names: Vec<String>,
    x: DMatrix<f64>,
    y: DVector<f64>,
}

fn design(records: &[TripGenRecord], covariates: &[&str], intercept: bool) -> Result<Design> {
    let mut names = Vec::new();
    if intercept {
        names.push(INTERCEPT.to_string());
    }
    names.extend(covariates.iter().map(|c| c.to_string()));
    let n = records.len();
    let p = names.len();
    let mut x = DMatrix::zeros(n, p);
    for (i, r) in records.iter().enumerate() {
        for (j, name) in names.iter().enumerate() {
            x[(i, j)] = if name == INTERCEPT {
                1.0
            } else {
                let v = *r.covariates.get(name).ok_or_else(|| {
                    Error::Validation(format!("record for person `{}` lacks covariate `{name}`", r.person_id))
                })?;
                if !v.is_finite() {
                    return Err(Error::Validation(format!("covariate `{name}` is not finite for `{}`", r.person_id)));
                }
                v
            };
        }
    }
    let y = DVector::from_iterator(n, records.iter().map(|r| f64::from(r.annual_trip_count)));
    Ok(Design { names, x, y })
}

fn rank_check(x: &DMatrix<f64>, names: &[String]) -> Result<nalgebra::linalg::QR<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..r.ncols()).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    let bad: Vec<&str> = (0..r.ncols())
        .filter(|&j| r[(j, j)].abs() <= 1e-10 * scale.max(f64::MIN_POSITIVE))
        .map(|j| names[j].as_str())
        .collect();
    if !bad.is_empty() {
        return Err(Error::Numerical(format!(
            "design matrix is rank deficient; collinear column(s): {}",
            bad.join(", ")
        )));
    }
    Ok(qr)
}

/// Ordinary least squares.
pub fn fit_linear(records: &[TripGenRecord], covariates: &[&str], intercept: InterceptMode) -> Result<RegressionFit> {
    let with_intercept = intercept == InterceptMode::Free;
    let d = design(records, covariates, with_intercept)?;
    let (n, p) = d.x.shape();
    if n <= p {
        return Err(Error::Validation(format!("{n} records cannot identify {p} coefficients")));
    }
    let qr = rank_check(&d.x, &d.names)?;
    let r = qr.r();
    let qty = qr.q().transpose() * &d.y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let resid = &d.y - &d.x * &beta;
    let ssr = resid.dot(&resid);
    let df = (n - p) as f64;
    let sigma2 = ssr / df;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::Numerical("triangular inverse failed".into()))?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let tdist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numerical(e.to_string()))?;
    let coefficients = d
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let se = (sigma2 * xtx_inv[(j, j)]).sqrt();
            let t = beta[j] / se;
            let pv = 2.0 * tdist.sf(t.abs());
            coef_row(name, beta[j], se, t, pv)
        })
        .collect();
    let sst = if with_intercept {
        let mean = d.y.mean();
        d.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
    } else {
        d.y.dot(&d.y)
    };
    let r2 = if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 };
    let i = f64::from(u8::from(with_intercept));
    let adj = 1.0 - (1.0 - r2) * (n as f64 - i) / df;
    Ok(RegressionFit {
        model: RegressionModel::Linear { intercept },
        coefficients,
        n,
        r2: Some(r2),
        adj_r2: Some(adj),
        sigma: Some(sigma2.sqrt()),
        theta: None,
        theta_std_error: None,
        theta_fixed: false,
        two_loglik: None,
        null_deviance: None,
        residual_deviance: None,
        converged: true,
        iterations: 0,
    })
}

fn coef_row(name: &str, est: f64, se: f64, stat: f64, p: f64) -> Coefficient {
    let ok = se.is_finite() && se > 0.0;
    Coefficient {
        name: name.to_string(),
        estimate: est,
        std_error: ok.then_some(se),
        statistic: ok.then_some(stat),
        p_value: ok.then_some(p),
        significance: if ok { significance_code(p).trim().to_string() } else { String::new() },
    }
}

fn check_counts(d: &Design) -> Result<()> {
    let (n, p) = d.x.shape();
    if d.y.iter().all(|v| *v == 0.0) {
        return Err(Error::Data("all trip counts are zero".into()));
    }
    if n <= p + 1 {
        return Err(Error::Validation(format!("{n} records cannot identify {p} coefficients and a dispersion")));
    }
    Ok(())
}

/// lnΓ(y+θ) − lnΓ(θ) and ψ(y+θ) − ψ(θ), summed exactly for moderate integer y.
fn gamma_ratio(y: f64, theta: f64) -> (f64, f64) {
    if y < 500.0 {
        let mut lg = 0.0;
        let mut dg = 0.0;
        let mut j = 0.0;
        while j < y {
            lg += (theta + j).ln();
            dg += 1.0 / (theta + j);
            j += 1.0;
        }
        (lg, dg)
    } else {
        (ln_gamma(y + theta) - ln_gamma(theta), digamma(y + theta) - digamma(theta))
    }
}

fn poisson_loglik(y: &DVector<f64>, eta: &DVector<f64>) -> f64 {
    y.iter().zip(eta.iter()).map(|(y, e)| y * e - e.exp() - ln_gamma(y + 1.0)).sum()
}

fn nb_loglik_terms(y: f64, eta: f64, theta: f64) -> f64 {
    let m = eta.exp();
    let (lg, _) = gamma_ratio(y, theta);
    // θ ln(θ/(θ+m)) + y ln(m/(θ+m))
    lg - ln_gamma(y + 1.0) - theta * (m / theta).ln_1p() + y * (eta - (theta + m).ln())
}

/// Negative-binomial log-likelihood and gradient over (β, ln θ); gradient omits ln θ when `fixed`.
fn nb_value_gradient(x: &DMatrix<f64>, y: &DVector<f64>, params: &[f64], fixed: Option<f64>) -> (f64, Vec<f64>) {
    let p = x.ncols();
    let beta = DVector::from_column_slice(&params[..p]);
    let theta = fixed.unwrap_or_else(|| params[p].exp());
    let eta = x * &beta;
    let mut ll = 0.0;
    let mut grad = vec![0.0; params.len()];
    let mut dtheta = 0.0;
    for i in 0..x.nrows() {
        let (yi, ei) = (y[i], eta[i]);
        let m = ei.exp();
        ll += nb_loglik_terms(yi, ei, theta);
        let w = (yi - m) * theta / (theta + m);
        for j in 0..p {
            grad[j] += w * x[(i, j)];
        }
        let (_, dg) = gamma_ratio(yi, theta);
        dtheta += dg - (m / theta).ln_1p() + (m - yi) / (theta + m);
    }
    if fixed.is_none() {
        grad[p] = theta * dtheta;
    }
    (ll, grad)
}

fn nb_deviance(y: &DVector<f64>, mu: impl Fn(usize) -> f64, theta: f64) -> f64 {
    2.0 * y
        .iter()
        .enumerate()
        .map(|(i, &yi)| {
            let m = mu(i);
            let a = if yi > 0.0 { yi * (yi / m).ln() } else { 0.0 };
            a - (yi + theta) * ((yi + theta) / (m + theta)).ln()
        })
        .sum::<f64>()
}

struct NewtonFit {
    beta: DVector<f64>,
    cov: DMatrix<f64>,
    iterations: usize,
    converged: bool,
}

/// Poisson maximum likelihood by Newton steps with step halving.
fn poisson_newton(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<NewtonFit> {
    let (n, p) = x.shape();
    let mut beta = DVector::zeros(p);
    let ybar = y.mean().max(1e-8);
    if let Some(j) = (0..p).find(|&j| (0..n).all(|i| x[(i, j)] == 1.0)) {
        beta[j] = ybar.ln();
    }
    let mut eta = x * &beta;
    let mut ll = poisson_loglik(y, &eta);
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..200 {
        iterations += 1;
        let mu = eta.map(f64::exp);
        let score = x.transpose() * (y - &mu);
        let mut info = DMatrix::zeros(p, p);
        for i in 0..n {
            let row = x.row(i);
            info += row.transpose() * row * mu[i];
        }
        let chol = info
            .cholesky()
            .ok_or_else(|| Error::Numerical("Poisson information matrix is singular".into()))?;
        let step = chol.solve(&score);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let cand = &beta + &step * t;
            let cand_eta = x * &cand;
            let cand_ll = poisson_loglik(y, &cand_eta);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs() {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || max_abs(step.as_slice()) * t < 1e-11 {
            converged = accepted || max_abs(score.as_slice()) < 1e-6;
            break;
        }
    }
    let mu = eta.map(f64::exp);
    let mut info = DMatrix::zeros(p, p);
    for i in 0..n {
        let row = x.row(i);
        info += row.transpose() * row * mu[i];
    }
    let cov = info
        .cholesky()
        .ok_or_else(|| Error::Numerical("Poisson information matrix is singular".into()))?
        .inverse();
    Ok(NewtonFit {
        beta,
        cov,
        iterations,
        converged,
    })
}

fn count_fit(design: &Design, beta: &[f64], se: &[Option<f64>]) -> Vec<Coefficient> {
    design
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| match se[j] {
            Some(s) => {
                let z = beta[j] / s;
                coef_row(name, beta[j], s, z, normal_two_sided_p(z))
            }
            None => coef_row(name, beta[j], f64::NAN, f64::NAN, f64::NAN),
        })
        .collect()
}

/// Poisson log-linear regression with a free intercept.
pub fn fit_poisson(records: &[TripGenRecord], covariates: &[&str]) -> Result<RegressionFit> {
    let d = design(records, covariates, true)?;
    check_counts(&d)?;
    rank_check(&d.x, &d.names)?;
    let fit = poisson_newton(&d.x, &d.y)?;
    let se: Vec<Option<f64>> = (0..d.names.len()).map(|j| Some(fit.cov[(j, j)].sqrt())).collect();
    let eta = &d.x * &fit.beta;
    let ll = poisson_loglik(&d.y, &eta);
    let dev = |mu: &dyn Fn(usize) -> f64| {
        2.0 * d
            .y
            .iter()
            .enumerate()
            .map(|(i, &yi)| {
                let m = mu(i);
                (if yi > 0.0 { yi * (yi / m).ln() } else { 0.0 }) - (yi - m)
            })
            .sum::<f64>()
    };
    let ybar = d.y.mean();
    Ok(RegressionFit {
        model: RegressionModel::Poisson,
        coefficients: count_fit(&d, fit.beta.as_slice(), &se),
        n: records.len(),
        r2: None,
        adj_r2: None,
        sigma: None,
        theta: None,
        theta_std_error: None,
        theta_fixed: false,
        two_loglik: Some(2.0 * ll),
        null_deviance: Some(dev(&|_| ybar)),
        residual_deviance: Some(dev(&|i| eta[i].exp())),
        converged: fit.converged,
        iterations: fit.iterations,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NegBinOptions {
    /// Hold θ at this value instead of estimating it.
    pub fixed_theta: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NegBinOptions {
    fn default() -> Self {
        Self {
            fixed_theta: None,
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

/// NB-2 regression, log link, variance m + m²/θ.
pub fn fit_negbin(records: &[TripGenRecord], covariates: &[&str]) -> Result<RegressionFit> {
    fit_negbin_with(records, covariates, &NegBinOptions::default())
}

pub fn fit_negbin_with(records: &[TripGenRecord], covariates: &[&str], opts: &NegBinOptions) -> Result<RegressionFit> {
    let d = design(records, covariates, true)?;
    check_counts(&d)?;
    rank_check(&d.x, &d.names)?;
    if let Some(t) = opts.fixed_theta {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Validation(format!("fixed θ must be positive, got {t}")));
        }
    }
    let p = d.x.ncols();
    let start = poisson_newton(&d.x, &d.y)?;
    let mut x0: Vec<f64> = start.beta.iter().copied().collect();
    if opts.fixed_theta.is_none() {
        // Moment estimate of θ from the Poisson fit.
        let eta = &d.x * &start.beta;
        let num: f64 = eta.iter().map(|e| e.exp().powi(2)).sum();
        let den: f64 = d.y.iter().zip(eta.iter()).map(|(y, e)| (y - e.exp()).powi(2) - e.exp()).sum();
        let theta0 = if den > 0.0 { (num / den).clamp(1e-3, 1e6) } else { 100.0 };
        x0.push(theta0.ln());
    }
    let fixed = opts.fixed_theta;
    let mut obj = |params: &[f64]| -> Result<(f64, Vec<f64>)> { Ok(nb_value_gradient(&d.x, &d.y, params, fixed)) };
    let optim = OptimOptions {
        tol: opts.tol,
        max_iter: opts.max_iter,
        ..OptimOptions::default()
    };
    let out = maximize(&mut obj, &x0, &optim)?;
    let h = hessian(&mut obj, &out.x, 1e-5)?;
    let k = h.len();
    let info = DMatrix::from_fn(k, k, |i, j| -h[i][j]);
    let se: Vec<Option<f64>> = match info.cholesky() {
        Some(c) => {
            let cov = c.inverse();
            (0..k).map(|i| Some(cov[(i, i)].sqrt()).filter(|s| s.is_finite())).collect()
        }
        None => vec![None; k],
    };
    let theta = fixed.unwrap_or_else(|| out.x[p].exp());
    let theta_se = if fixed.is_none() { se[p].map(|s| s * theta) } else { None };
    let beta = &out.x[..p];
    let eta = &d.x * DVector::from_column_slice(beta);
    let ybar = d.y.mean();
    Ok(RegressionFit {
        model: RegressionModel::NegativeBinomial,
        coefficients: count_fit(&d, beta, &se[..p]),
        n: records.len(),
        r2: None,
        adj_r2: None,
        sigma: None,
        theta: Some(theta),
        theta_std_error: theta_se,
        theta_fixed: fixed.is_some(),
        two_loglik: Some(2.0 * out.value),
        null_deviance: Some(nb_deviance(&d.y, |_| ybar, theta)),
        residual_deviance: Some(nb_deviance(&d.y, |i| eta[i].exp(), theta)),
        converged: out.converged,
        iterations: out.iterations,
    })
}

/// Fits keyed by trip purpose.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TripGenModels {
    pub fits: BTreeMap<Purpose, RegressionFit>,
}

pub const TRIPGEN_FORMAT: &str = "intercity-tripgen/1";

#[derive(Serialize, Deserialize)]
struct TripGenDocument {
    format: String,
    fits: BTreeMap<Purpose, RegressionFit>,
}

pub fn write_tripgen_models(models: &TripGenModels, path: &Path) -> Result<()> {
    let doc = TripGenDocument {
        format: TRIPGEN_FORMAT.into(),
        fits: models.fits.clone(),
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_tripgen_models(path: &Path) -> Result<TripGenModels> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: TripGenDocument =
        serde_json::from_str(&text).map_err(|e| Error::load(path, None, format!("not a trip-generation document: {e}")))?;
    if doc.format != TRIPGEN_FORMAT {
        return Err(Error::load(path, None, format!("unsupported format `{}`", doc.format)));
    }
    Ok(TripGenModels { fits: doc.fits })
}
