//! Human-readable summaries printed to standard output.

use std::fmt::Write;

use intercity::estimation::EstimationResult;
use intercity::forecast::{Delta, InducedReport};
use intercity::spec::Purpose;
use intercity::tripgen::{RegressionFit, RegressionModel};
use intercity::validate::ValidationReport;

const SIGNIF: &str = "Signif. codes:  0 '***' 0.001 '**' 0.01 '*' 0.05 '.' 0.1 ' ' 1";

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.prec$}"))
}

fn p_value(p: Option<f64>) -> String {
    match p {
        None => "NA".into(),
        Some(p) if p < 2e-16 => "<2e-16".into(),
        Some(p) if p < 1e-4 => format!("{p:.2e}"),
        Some(p) => format!("{p:.4}"),
    }
}

/// 32114.88 -> "32,114.88".
pub fn thousands(x: f64) -> String {
    let s = format!("{:.2}", x.abs());
    let (int, frac) = s.split_once('.').expect("two decimals");
    let mut grouped = String::new();
    for (i, c) in int.chars().enumerate() {
        if i > 0 && (int.len() - i) % 3 == 0 {
            grouped.push(',');
        }
        grouped.push(c);
    }
    format!("{}{grouped}.{frac}", if x < 0.0 { "-" } else { "" })
}

pub fn estimation(r: &EstimationResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Joint RP/SP nested logit, {} trips", purpose_label(r.purpose));
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<18} {:>12} {:>12} {:>9} {:>10}", "", "Estimate", "Std. Error", "z value", "Pr(>|z|)");
    for p in &r.parameters {
        let _ = writeln!(
            s,
            "{:<18} {:>12.6} {:>12} {:>9} {:>10} {}",
            p.name,
            p.estimate,
            opt(p.std_error, 6),
            opt(p.z, 3),
            p_value(p.p_value),
            p.significance
        );
    }
    let _ = writeln!(s, "---");
    let _ = writeln!(s, "{SIGNIF}");
    if let Some(m) = &r.scale {
        let _ = writeln!(s, "Scale mu ({}): {:.6} (s.e. {})", m.parameter, m.mu, opt(m.std_error, 6));
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<22} {:>14.2}", "LL0", r.ll0);
    let _ = writeln!(s, "{:<22} {:>14.2}", "LL1", r.ll1);
    let _ = writeln!(s, "{:<22} {:>14.4}", "rho", r.rho);
    let _ = writeln!(s, "{:<22} {:>14.4}", "rho.adj", r.rho_adj);
    let _ = writeln!(s, "{:<22} {:>14}", "K", r.k);
    let _ = writeln!(s, "{:<22} {:>14}", "RP observations", format!("{} ({} persons)", r.n_rp, r.rp_persons));
    let _ = writeln!(s, "{:<22} {:>14}", "SP observations", format!("{} ({} persons)", r.n_sp, r.sp_persons));
    for (label, v) in &r.vot {
        let _ = writeln!(s, "{:<22} {:>14} VND/h", format!("VOT ({label})"), thousands(*v));
    }
    let c = &r.convergence;
    let _ = writeln!(
        s,
        "\n{} after {} iterations ({}); gradient max-norm {:.3e}, tolerance {:.1e}",
        if c.converged { "Converged" } else { "NOT converged" },
        c.iterations,
        c.stop_reason,
        c.gradient_norm,
        c.tolerance
    );
    if let Some(note) = &r.covariance_note {
        let _ = writeln!(s, "Standard errors unavailable: {note}");
    }
    s
}

fn purpose_label(p: Purpose) -> &'static str {
    match p {
        Purpose::Business => "business",
        Purpose::NonBusiness => "non-business",
    }
}

pub fn tripgen(fit: &RegressionFit, purpose: Purpose) -> String {
    let mut s = String::new();
    let (family, stat) = match fit.model {
        RegressionModel::Linear { .. } => ("linear regression", "t value"),
        RegressionModel::NegativeBinomial => ("negative binomial regression", "z value"),
        RegressionModel::Poisson => ("Poisson regression", "z value"),
    };
    let _ = writeln!(s, "Trip generation, {} trips: {family} (n = {})", purpose_label(purpose), fit.n);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<18} {:>12} {:>12} {:>9} {:>10}", "", "Estimate", "Std. Error", stat, "Pr(>|.|)");
    for c in &fit.coefficients {
        let _ = writeln!(
            s,
            "{:<18} {:>12.6} {:>12} {:>9} {:>10} {}",
            c.name,
            c.estimate,
            opt(c.std_error, 6),
            opt(c.statistic, 3),
            p_value(c.p_value),
            c.significance
        );
    }
    let _ = writeln!(s, "---");
    let _ = writeln!(s, "{SIGNIF}");
    if let Some(r2) = fit.r2 {
        let _ = writeln!(s, "R-squared {:.6}, adjusted {}", r2, opt(fit.adj_r2, 6));
    }
    if let Some(sigma) = fit.sigma {
        let _ = writeln!(s, "Residual standard error {sigma:.4}");
    }
    if let Some(t) = fit.theta {
        let fixed = if fit.theta_fixed { " (fixed)" } else { "" };
        let _ = writeln!(s, "Theta {t:.4}{fixed}, s.e. {}", opt(fit.theta_std_error, 4));
    }
    if let Some(v) = fit.two_loglik {
        let _ = writeln!(s, "2 x log-likelihood {v:.3}");
    }
    if let (Some(n), Some(r)) = (fit.null_deviance, fit.residual_deviance) {
        let _ = writeln!(s, "Null deviance {n:.3}, residual deviance {r:.3}");
    }
    if !fit.converged {
        let _ = writeln!(s, "NOT converged after {} iterations", fit.iterations);
    }
    s
}

fn delta_row(s: &mut String, label: &str, d: &Delta) {
    let pct = d.percent.map_or_else(|| "NA".into(), |p| format!("{p:+.2}%"));
    let _ = writeln!(s, "{label:<18} {:>14.2} {:>14.2} {:>14.2} {:>9}", d.base, d.alternative, d.absolute, pct);
}

pub fn forecast(r: &InducedReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Induced travel: `{}` against base `{}`", r.alternative_scenario, r.base_scenario);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<18} {:>14} {:>14} {:>14} {:>9}", "", "base", "alternative", "change", "change");
    delta_row(&mut s, "trips", &r.trips);
    delta_row(&mut s, "vehicle-km", &r.vmt);
    for m in &r.modes {
        delta_row(&mut s, &format!("  {}", m.mode), &m.trips);
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Mode shift (trips, rows from / columns to):");
    let _ = write!(s, "{:<17}", "");
    for m in &r.mode_shift.modes {
        let _ = write!(s, " {:>16}", m.to_string());
    }
    let _ = writeln!(s, " {:>16}", "suppressed");
    for (i, m) in r.mode_shift.modes.iter().enumerate() {
        let _ = write!(s, "{:<17}", m.to_string());
        for v in &r.mode_shift.flows[i] {
            let _ = write!(s, " {v:>16.2}");
        }
        let _ = writeln!(s, " {:>16.2}", r.mode_shift.suppressed[i]);
    }
    let _ = write!(s, "{:<17}", "induced");
    for v in &r.mode_shift.induced {
        let _ = write!(s, " {v:>16.2}");
    }
    let _ = writeln!(s);
    if let Some(p) = r.induced_percent {
        let _ = writeln!(s, "\nInduced trips: {p:.2}% of base trips");
    }
    s
}

pub fn validation(r: &ValidationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Checked {} parameter points over {} observations", r.points, r.observations);
    match &r.gradient {
        Some(w) => {
            let _ = writeln!(
                s,
                "worst gradient relative error   {:.3e}  (point {}, {})",
                w.error, w.point, w.location
            );
        }
        None => {
            let _ = writeln!(s, "worst gradient relative error   NA");
        }
    }
    match &r.oracle {
        Some(w) => {
            let _ = writeln!(
                s,
                "worst probability difference    {:.3e}  (point {}, observation {}; {} enumerated, {} skipped)",
                w.error, w.point, w.location, r.oracle_checked, r.oracle_skipped
            );
        }
        None => {
            let _ = writeln!(s, "worst probability difference    NA ({} skipped)", r.oracle_skipped);
        }
    }
    let _ = writeln!(
        s,
        "{}",
        if r.passed() {
            "PASS".to_string()
        } else {
            format!("FAIL: {} check(s) out of tolerance", r.failures.len())
        }
    );
    s
}
