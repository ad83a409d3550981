//! Report types and their table rendering.

use std::fmt::Write as _;

use mixsel::caic::CaicResult;
use mixsel::estimation::{conditional_loglik, Family, FittedModel};
use mixsel::stepwise::{render_trace, StepTrace};
use serde::{Deserialize, Serialize};

/// Formats with `digits` significant digits, trailing zeros removed.
pub fn sig(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i64;
    if !(-4..15).contains(&mag) {
        let s = format!("{:.*e}", digits - 1, x);
        let (mantissa, exp) = s.split_once('e').expect("exponent form");
        let mantissa = if mantissa.contains('.') { mantissa.trim_end_matches('0').trim_end_matches('.') } else { mantissa };
        return format!("{mantissa}e{exp}");
    }
    let decimals = (digits as i64 - 1 - mag).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CaicReport {
    pub loglikelihood: f64,
    pub df: f64,
    pub reduced_formula: Option<String>,
    pub new_fit: bool,
    pub caic: f64,
}

impl From<&CaicResult> for CaicReport {
    fn from(r: &CaicResult) -> Self {
        CaicReport {
            loglikelihood: r.cond_loglik,
            df: r.df,
            reduced_formula: r.reduced_formula.as_ref().map(|f| f.to_string()),
            new_fit: r.refitted,
            caic: r.caic,
        }
    }
}

impl CaicReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "$loglikelihood\n[1] {}\n", sig(self.loglikelihood, 7));
        let _ = writeln!(out, "$df\n[1] {}\n", sig(self.df, 7));
        let reduced = self.reduced_formula.as_deref().unwrap_or("NULL");
        let _ = writeln!(out, "$reducedFormula\n{reduced}\n");
        let _ = writeln!(out, "$newFit\n{}\n", if self.new_fit { "TRUE" } else { "NULL" });
        let _ = writeln!(out, "$caic\n[1] {}", sig(self.caic, 7));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffect {
    pub name: String,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEffect {
    pub group: String,
    pub names: Vec<String>,
    pub variances: Vec<f64>,
    pub sds: Vec<f64>,
    /// `[i, j, r]` for `i > j`.
    pub correlations: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    pub levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FitReport {
    pub formula: String,
    pub family: Family,
    pub method: String,
    pub criterion: f64,
    pub marginal_aic: f64,
    pub conditional_loglik: f64,
    pub converged: bool,
    pub n_obs: usize,
    pub residual_sd: Option<f64>,
    pub random_effects: Vec<RandomEffect>,
    pub groups: Vec<Group>,
    pub fixed_effects: Vec<FixedEffect>,
}

impl FitReport {
    pub fn new(m: &FittedModel) -> Self {
        let gaussian = m.family == Family::Gaussian;
        let method = match (gaussian, m.reml) {
            (true, true) => "REML",
            (true, false) => "ML",
            _ => "Laplace",
        };
        let mut groups: Vec<Group> =
            m.design.groups.iter().map(|g| Group { name: g.name.clone(), levels: g.n_levels }).collect();
        groups.sort_by(|a, b| b.levels.cmp(&a.levels));
        FitReport {
            formula: m.formula.to_string(),
            family: m.family,
            method: method.into(),
            criterion: m.criterion,
            marginal_aic: m.marginal_aic(),
            conditional_loglik: conditional_loglik(m),
            converged: m.converged,
            n_obs: m.n(),
            residual_sd: gaussian.then(|| m.sigma()),
            random_effects: m
                .variance_components()
                .into_iter()
                .map(|v| RandomEffect {
                    group: v.group,
                    names: v.names,
                    variances: v.sds.iter().map(|s| s * s).collect(),
                    sds: v.sds,
                    correlations: v.correlations,
                })
                .collect(),
            groups,
            fixed_effects: m
                .design
                .x_names
                .iter()
                .zip(&m.beta)
                .map(|(n, b)| FixedEffect { name: n.clone(), estimate: *b })
                .collect(),
        }
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        match self.family {
            Family::Gaussian => {
                let _ = writeln!(out, "Linear mixed model fit by {}", self.method);
            }
            f => {
                let _ = writeln!(out, "Generalized linear mixed model fit by maximum likelihood (Laplace Approximation)");
                let _ = writeln!(out, " Family: {} ( {} )", f.name(), f.link_name());
            }
        }
        let _ = writeln!(out, "Formula: {}", self.formula);
        let label = if self.method == "Laplace" { "-2 log-likelihood" } else { self.method.as_str() };
        let _ = writeln!(out, "{label} criterion at convergence: {}", sig(self.criterion, 7));
        let _ = writeln!(out, "AIC: {}", sig(self.marginal_aic, 7));
        if !self.converged {
            let _ = writeln!(out, "Warning: the optimizer did not converge");
        }
        let _ = writeln!(out, "\nRandom effects:");
        let mut rows: Vec<[String; 5]> = vec![[
            "Groups".into(),
            "Name".into(),
            "Variance".into(),
            "Std.Dev.".into(),
            "Corr".into(),
        ]];
        for re in &self.random_effects {
            for (i, name) in re.names.iter().enumerate() {
                let corr: Vec<String> =
                    re.correlations.iter().filter(|c| c.0 == i).map(|c| format!("{:.2}", c.2)).collect();
                rows.push([
                    if i == 0 { re.group.clone() } else { String::new() },
                    name.clone(),
                    sig(re.variances[i], 5),
                    sig(re.sds[i], 5),
                    corr.join(" "),
                ]);
            }
        }
        if let Some(sd) = self.residual_sd {
            rows.push(["Residual".into(), String::new(), sig(sd * sd, 5), sig(sd, 5), String::new()]);
        }
        let widths: Vec<usize> = (0..5).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        for r in &rows {
            let line = format!(
                " {:<w0$} {:<w1$} {:>w2$} {:>w3$} {}",
                r[0],
                r[1],
                r[2],
                r[3],
                r[4],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            );
            let _ = writeln!(out, "{}", line.trim_end());
        }
        let groups: Vec<String> = self.groups.iter().map(|g| format!("{}, {}", g.name, g.levels)).collect();
        if groups.is_empty() {
            let _ = writeln!(out, "Number of obs: {}", self.n_obs);
        } else {
            let _ = writeln!(out, "Number of obs: {}, groups:  {}", self.n_obs, groups.join("; "));
        }
        let _ = writeln!(out, "\nFixed effects:");
        let w = self.fixed_effects.iter().map(|f| f.name.len()).max().unwrap_or(0);
        let _ = writeln!(out, "{:<w$}  {:>10}", "", "Estimate");
        for f in &self.fixed_effects {
            let _ = writeln!(out, "{:<w$}  {:>10}", f.name, sig(f.estimate, 7));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub trace: StepTrace,
    pub best: CaicReport,
}

impl StepReport {
    pub fn table(&self, with_trace: bool) -> String {
        if with_trace {
            render_trace(&self.trace)
        } else {
            format!("Best model:  {} , cAIC: {}\n", self.trace.best_formula, sig(self.trace.best_caic, 7))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(sig(1711.61778, 7), "1711.618");
        assert_eq!(sig(31.301923, 7), "31.30192");
        assert_eq!(sig(-824.50697, 7), "-824.507");
        assert_eq!(sig(2.0, 7), "2");
        assert_eq!(sig(0.000123456789, 3), "0.000123");
        assert_eq!(sig(0.0, 7), "0");
        assert_eq!(sig(9.0879e-13, 5), "9.0879e-13");
    }
}
