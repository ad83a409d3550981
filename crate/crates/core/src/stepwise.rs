//! Stepwise selection of random effects, fixed effects and smooth terms by
//! conditional AIC.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::caic::{caic_with, CaicOptions, CaicResult};
use crate::data::Dataset;
use crate::design::BlockSource;
use crate::error::{Error, Result};
use crate::estimation::{fit_model, FittedModel};
use crate::formula::{BasisType, ModelFormula, RandomTerm, SmoothTerm};

/// A candidate must beat the incumbent by more than this.
const IMPROVEMENT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Backward,
    Forward,
    Both,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::Backward => "backward",
            Direction::Forward => "forward",
            Direction::Both => "both",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backward" => Ok(Direction::Backward),
            "forward" => Ok(Direction::Forward),
            "both" => Ok(Direction::Both),
            other => Err(Error::Unsupported(format!("direction `{other}`"))),
        }
    }
}

/// Terms protected from modification.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Keep {
    /// Linear terms and smooths, given as a right-hand side.
    pub fixed: Option<ModelFormula>,
    pub random: Option<ModelFormula>,
}

impl Keep {
    fn fixed_var(&self, v: &str) -> bool {
        self.fixed.as_ref().is_some_and(|k| k.fixed.iter().any(|x| x == v))
    }

    fn smooth_var(&self, v: &str) -> bool {
        self.fixed.as_ref().is_some_and(|k| k.smooths.iter().any(|s| s.variable == v))
    }

    fn random_term(&self, t: &RandomTerm) -> bool {
        self.random.as_ref().is_some_and(|k| k.randoms.contains(t))
    }
}

#[derive(Debug, Clone)]
pub struct StepConfig {
    pub direction: Direction,
    pub group_candidates: Vec<String>,
    pub slope_candidates: Vec<String>,
    pub fix_ef: Vec<String>,
    pub keep: Keep,
    /// Largest number of random slopes per grouping variable.
    pub max_slopes: usize,
    /// Whether a slope variable already used with one grouping variable may
    /// be added to another.
    pub allow_use_across: bool,
    /// Whether non-converged candidate fits may be selected.
    pub calc_non_optim: bool,
    pub bs_type: BasisType,
    pub num_cores: usize,
    /// Print each step to stderr as it completes.
    pub trace: bool,
    pub caic: CaicOptions,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            direction: Direction::Backward,
            group_candidates: Vec::new(),
            slope_candidates: Vec::new(),
            fix_ef: Vec::new(),
            keep: Keep::default(),
            max_slopes: 2,
            allow_use_across: false,
            calc_non_optim: false,
            bs_type: BasisType::Trunc,
            num_cores: 1,
            trace: false,
            caic: CaicOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    NoImprovement,
    ZeroVarianceSmooth,
    NoCandidates,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::NoImprovement => "no-improvement",
            StopReason::ZeroVarianceSmooth => "zero-variance-smooth",
            StopReason::NoCandidates => "no-candidates",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub formula: String,
    /// `None` when the candidate could not be fitted.
    pub cond_loglik: Option<f64>,
    pub df: Option<f64>,
    pub caic: Option<f64>,
    pub converged: bool,
    /// Formula after boundary reduction, when it differs.
    pub reduced_formula: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub direction: Direction,
    pub incumbent: String,
    pub incumbent_caic: f64,
    pub candidates: Vec<CandidateRow>,
    /// Formula moved to in this step, if any.
    pub chosen: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub steps: Vec<StepRecord>,
    pub stop_reason: StopReason,
    pub best_formula: String,
    pub best_caic: f64,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub model: FittedModel,
    pub caic: CaicResult,
    pub trace: StepTrace,
}

fn push_unique(out: &mut Vec<ModelFormula>, f: ModelFormula) {
    if !out.contains(&f) {
        out.push(f);
    }
}

/// Candidate reductions of `f`.
pub fn backward_candidates(f: &ModelFormula, fix_ef: &[String], keep: &Keep) -> Vec<ModelFormula> {
    let mut out = Vec::new();
    for (i, term) in f.randoms.iter().enumerate() {
        if keep.random_term(term) {
            continue;
        }
        let names = term.component_names();
        if term.correlated && names.len() > 1 {
            let split: Vec<RandomTerm> = names.iter().map(|n| single_component(term, n)).collect();
            let mut g = f.clone();
            g.randoms.splice(i..=i, split);
            push_unique(&mut out, g);
            for drop in &names {
                let mut g = f.clone();
                g.randoms[i] = without_component(term, drop);
                push_unique(&mut out, g);
            }
        } else {
            let mut g = f.clone();
            g.randoms.remove(i);
            push_unique(&mut out, g);
        }
    }
    for v in fix_ef {
        if let Some(k) = f.smooths.iter().position(|s| &s.variable == v) {
            if !keep.smooth_var(v) {
                let mut g = f.clone();
                g.smooths.remove(k);
                g.fixed.push(v.clone());
                push_unique(&mut out, g);
            }
        } else if let Some(k) = f.fixed.iter().position(|x| x == v) {
            if !keep.fixed_var(v) {
                let mut g = f.clone();
                g.fixed.remove(k);
                push_unique(&mut out, g);
            }
        }
    }
    out
}

fn single_component(term: &RandomTerm, name: &str) -> RandomTerm {
    if name == crate::formula::INTERCEPT {
        RandomTerm::intercept(&term.group)
    } else {
        RandomTerm::slope(&term.group, name)
    }
}

fn without_component(term: &RandomTerm, name: &str) -> RandomTerm {
    let mut t = term.clone();
    if name == crate::formula::INTERCEPT {
        t.has_intercept = false;
    } else {
        t.slopes.retain(|s| s != name);
    }
    t.correlated = t.dim() > 1;
    t
}

/// Candidate extensions of `f`.
pub fn forward_candidates(f: &ModelFormula, c: &StepConfig, d: &Dataset) -> Result<Vec<ModelFormula>> {
    for v in c.group_candidates.iter().chain(&c.slope_candidates).chain(&c.fix_ef) {
        if !d.has_column(v) {
            return Err(Error::Data(format!("candidate variable `{v}` is not in the data")));
        }
    }
    let mut out = Vec::new();
    for g in &c.group_candidates {
        if !f.randoms.iter().any(|t| &t.group == g) {
            let mut h = f.clone();
            h.randoms.push(RandomTerm::intercept(g));
            push_unique(&mut out, h);
        }
    }
    let mut groups: Vec<&str> = Vec::new();
    for t in &f.randoms {
        if !groups.contains(&t.group.as_str()) {
            groups.push(&t.group);
        }
    }
    for g in groups {
        let used: Vec<&String> = f.randoms.iter().filter(|t| t.group == g).flat_map(|t| &t.slopes).collect();
        if used.len() >= c.max_slopes {
            continue;
        }
        for v in &c.slope_candidates {
            if v == g || used.contains(&v) {
                continue;
            }
            let elsewhere = f.randoms.iter().any(|t| t.group != g && t.slopes.contains(v));
            if elsewhere && !c.allow_use_across {
                continue;
            }
            let mut h = f.clone();
            h.randoms.push(RandomTerm::slope(g, v));
            push_unique(&mut out, h);
        }
    }
    for v in &c.fix_ef {
        let linear = f.fixed.iter().position(|x| x == v);
        let smooth = f.smooths.iter().any(|s| &s.variable == v);
        match linear {
            None if !smooth => {
                let mut h = f.clone();
                h.fixed.push(v.clone());
                push_unique(&mut out, h);
            }
            Some(k) if !c.keep.fixed_var(v) => {
                let mut h = f.clone();
                h.fixed.remove(k);
                h.smooths.push(SmoothTerm::new(v, c.bs_type.clone()));
                push_unique(&mut out, h);
            }
            _ => {}
        }
    }
    Ok(out)
}

fn validate_config(m: &FittedModel, c: &StepConfig) -> Result<()> {
    if c.num_cores == 0 {
        return Err(Error::Unsupported("number of cores must be at least 1".into()));
    }
    if let Some(k) = &c.keep.fixed {
        for v in &k.fixed {
            if !m.formula.fixed.contains(v) {
                return Err(Error::Formula(format!("kept fixed term `{v}` is not in the initial model")));
            }
        }
        for s in &k.smooths {
            if !m.formula.smooths.iter().any(|t| t.variable == s.variable) {
                return Err(Error::Formula(format!("kept smooth `{s}` is not in the initial model")));
            }
        }
    }
    if let Some(k) = &c.keep.random {
        for t in &k.randoms {
            if !m.formula.randoms.contains(t) {
                return Err(Error::Formula(format!("kept random term `{t}` is not in the initial model")));
            }
        }
    }
    Ok(())
}

/// Whether any smooth of the model has a variance component on the
/// boundary.
pub fn has_zero_variance_smooth(m: &FittedModel, tol: f64) -> bool {
    m.design.template.blocks.iter().any(|b| {
        matches!(b.source, BlockSource::Smooth(_)) && (0..b.dim).any(|c| m.theta[b.theta_index(c, c)].abs() <= tol)
    })
}

struct Evaluated {
    row: CandidateRow,
    fit: Option<(FittedModel, CaicResult)>,
}

fn evaluate(m: &FittedModel, f: &ModelFormula, opts: &CaicOptions) -> Evaluated {
    let res = fit_model(f, m.data.clone(), m.family, &m.options).and_then(|fit| {
        let converged = fit.converged;
        caic_with(&fit, opts).map(|o| (o, converged))
    });
    match res {
        Ok((o, converged)) => Evaluated {
            row: CandidateRow {
                formula: f.rhs(),
                cond_loglik: Some(o.result.cond_loglik),
                df: Some(o.result.df),
                caic: Some(o.result.caic),
                converged,
                reduced_formula: o.result.reduced_formula.as_ref().map(|r| r.rhs()),
                error: None,
            },
            fit: Some((o.model, o.result)),
        },
        Err(e) => Evaluated {
            row: CandidateRow {
                formula: f.rhs(),
                cond_loglik: None,
                df: None,
                caic: None,
                converged: false,
                reduced_formula: None,
                error: Some(e.to_string()),
            },
            fit: None,
        },
    }
}

/// Stepwise search starting from `m`.
pub fn step_caic(m: &FittedModel, c: &StepConfig) -> Result<StepOutcome> {
    validate_config(m, c)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(c.num_cores)
        .build()
        .map_err(|e| Error::Unsupported(format!("thread pool: {e}")))?;
    pool.install(|| run(m, c))
}

fn run(m: &FittedModel, c: &StepConfig) -> Result<StepOutcome> {
    let start = caic_with(m, &c.caic)?;
    let mut model = start.model;
    let mut best = start.result;
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut dir = match c.direction {
        Direction::Both => Direction::Forward,
        d => d,
    };
    let mut failed_last = false;
    let stop_reason = loop {
        if c.trace && steps.is_empty() {
            eprintln!("Starting stepwise procedure...");
        }
        let candidates = match dir {
            Direction::Backward => backward_candidates(&model.formula, &c.fix_ef, &c.keep),
            _ => forward_candidates(&model.formula, c, &model.data)?,
        };
        let evaluated: Vec<Evaluated> = candidates.par_iter().map(|f| evaluate(&model, f, &c.caic)).collect();
        let mut pick: Option<(usize, f64)> = None;
        for (i, e) in evaluated.iter().enumerate() {
            let Some(v) = e.row.caic.filter(|v| v.is_finite()) else { continue };
            if !(e.row.converged || c.calc_non_optim) {
                continue;
            }
            if pick.is_none_or(|(_, b)| v < b) {
                pick = Some((i, v));
            }
        }
        let improved = pick.filter(|&(_, v)| v < best.caic - IMPROVEMENT_TOL).map(|(i, _)| i);
        let record = StepRecord {
            direction: dir,
            incumbent: model.formula.rhs(),
            incumbent_caic: best.caic,
            candidates: evaluated.iter().map(|e| e.row.clone()).collect(),
            chosen: improved.map(|i| evaluated[i].row.formula.clone()),
        };
        if c.trace {
            eprint!("{}", render_step(steps.len() + 1, &record));
        }
        steps.push(record);
        if let Some(i) = improved {
            let (fit, res) = evaluated.into_iter().nth(i).and_then(|e| e.fit).expect("selected candidate has a fit");
            model = fit;
            best = res;
            if has_zero_variance_smooth(&model, c.caic.boundary_tol) {
                break StopReason::ZeroVarianceSmooth;
            }
            failed_last = false;
        } else {
            let reason = if candidates.is_empty() { StopReason::NoCandidates } else { StopReason::NoImprovement };
            if c.direction != Direction::Both || failed_last {
                break reason;
            }
            failed_last = true;
        }
        if c.direction == Direction::Both {
            dir = if dir == Direction::Forward { Direction::Backward } else { Direction::Forward };
        }
    };
    let trace = StepTrace { steps, stop_reason, best_formula: model.formula.rhs(), best_caic: best.caic };
    if c.trace {
        eprint!("{}", render_summary(&trace));
    }
    Ok(StepOutcome { model, caic: best, trace })
}

const RULE: &str = "_____________________________________________";

/// Trace block of one step.
pub fn render_step(index: usize, s: &StepRecord) -> String {
    let mut out = format!("{RULE}\n{RULE}\n\n");
    out += &format!("Step {index} ({}):  cAIC={:.4}\n", s.direction.label(), s.incumbent_caic);
    out += &format!("Best model so far: {}\n", s.incumbent);
    if s.candidates.is_empty() {
        out += "No new candidates.\n\n";
        return out;
    }
    out += "New Candidates:\n\n";
    out += &format!("Calculating cAIC for {} model(s) ...\n\n", s.candidates.len());
    let width = s.candidates.iter().map(|r| r.formula.len()).max().unwrap_or(0).max(6);
    out += &format!("{:>width$}  {:>13}  {:>10}  {:>10}\n", "models", "loglikelihood", "df", "caic");
    for r in &s.candidates {
        let num = |v: Option<f64>, w: usize, d: usize| v.map_or_else(|| format!("{:>w$}", "NA"), |x| format!("{x:>w$.d$}"));
        let mut line = format!(
            "{:>width$}  {}  {}  {}",
            r.formula,
            num(r.cond_loglik, 13, 5),
            num(r.df, 10, 6),
            num(r.caic, 10, 4)
        );
        if let Some(e) = &r.error {
            line += &format!("  (failed: {e})");
        } else if !r.converged {
            line += "  (not converged)";
        }
        out += &line;
        out += "\n";
    }
    out += "\n";
    out
}

fn render_summary(t: &StepTrace) -> String {
    let mut out = format!("{RULE}\n{RULE}\n\n");
    if t.stop_reason == StopReason::ZeroVarianceSmooth {
        out += "Stopping: the selected model contains zero variance components.\n";
    }
    out += &format!("Best model:  {} , cAIC: {:.4}\n{RULE}\n", t.best_formula, t.best_caic);
    out
}

/// Full trace text as printed during the search.
pub fn render_trace(t: &StepTrace) -> String {
    let mut out = String::from("Starting stepwise procedure...\n");
    for (i, s) in t.steps.iter().enumerate() {
        out += &render_step(i + 1, s);
    }
    out += &render_summary(t);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Column;
    use crate::formula::{parse_formula, parse_rhs};

    fn rhs_list(v: &[ModelFormula]) -> Vec<String> {
        v.iter().map(|f| f.rhs()).collect()
    }

    #[test]
    fn correlated_term_reductions() {
        let f = parse_formula("Reaction ~ Days + (Days | Subject)").unwrap();
        let c = backward_candidates(&f, &[], &Keep::default());
        assert_eq!(
            rhs_list(&c),
            vec![
                "~ Days + (1 | Subject) + (0 + Days | Subject)",
                "~ Days + (0 + Days | Subject)",
                "~ Days + (1 | Subject)",
            ]
        );
    }

    #[test]
    fn independent_terms_drop_one_at_a_time() {
        let f = parse_formula("strength ~ 1 + (1 | sample) + (1 | batch)").unwrap();
        let c = backward_candidates(&f, &[], &Keep::default());
        assert_eq!(rhs_list(&c), vec!["~ (1 | batch)", "~ (1 | sample)"]);
        let last = parse_formula("strength ~ (1 | sample)").unwrap();
        assert_eq!(rhs_list(&backward_candidates(&last, &[], &Keep::default())), vec!["~ 1"]);
        assert!(backward_candidates(&parse_formula("y ~ 1").unwrap(), &[], &Keep::default()).is_empty());
    }

    #[test]
    fn fixed_effect_reductions_and_keep() {
        let f = parse_formula("y ~ x2 + s(x0) + (1 | fac)").unwrap();
        let fix: Vec<String> = vec!["x0".into(), "x2".into()];
        let c = backward_candidates(&f, &fix, &Keep::default());
        assert_eq!(rhs_list(&c), vec!["~ x2 + s(x0, bs = \"trunc\")", "~ x2 + x0 + (1 | fac)", "~ s(x0, bs = \"trunc\") + (1 | fac)"]);
        let keep = Keep { fixed: Some(parse_rhs("~ s(x0) + x2").unwrap()), random: Some(parse_rhs("~ (1 | fac)").unwrap()) };
        assert!(backward_candidates(&f, &fix, &keep).is_empty());
    }

    fn dataset() -> Dataset {
        let n = 12;
        Dataset::new()
            .with_column("y", Column::numeric((0..n).map(|i| i as f64).collect()))
            .unwrap()
            .with_column("x1", Column::numeric((0..n).map(|i| (i % 5) as f64).collect()))
            .unwrap()
            .with_column("x3", Column::numeric((0..n).map(|i| (i * 7 % 11) as f64).collect()))
            .unwrap()
            .with_column("batch", Column::categorical(&(0..n).map(|i| format!("b{}", i % 3)).collect::<Vec<_>>()))
            .unwrap()
            .with_column("sample", Column::categorical(&(0..n).map(|i| format!("s{}", i % 4)).collect::<Vec<_>>()))
            .unwrap()
    }

    #[test]
    fn forward_groups_slopes_and_smooths() {
        let d = dataset();
        let c = StepConfig {
            group_candidates: vec!["batch".into(), "sample".into()],
            ..Default::default()
        };
        let f = parse_formula("y ~ 1").unwrap();
        assert_eq!(rhs_list(&forward_candidates(&f, &c, &d).unwrap()), vec!["~ (1 | batch)", "~ (1 | sample)"]);

        let c = StepConfig {
            slope_candidates: vec!["x1".into(), "x3".into()],
            fix_ef: vec!["x1".into(), "x3".into()],
            max_slopes: 1,
            ..Default::default()
        };
        let f = parse_formula("y ~ x1 + (1 | batch) + (0 + x1 | sample)").unwrap();
        let got = rhs_list(&forward_candidates(&f, &c, &d).unwrap());
        assert_eq!(
            got,
            vec![
                "~ x1 + (1 | batch) + (0 + x1 | sample) + (0 + x3 | batch)",
                "~ s(x1, bs = \"trunc\") + (1 | batch) + (0 + x1 | sample)",
                "~ x1 + x3 + (1 | batch) + (0 + x1 | sample)",
            ]
        );
        let across = StepConfig { allow_use_across: true, ..c.clone() };
        assert!(rhs_list(&forward_candidates(&f, &across, &d).unwrap()).contains(&"~ x1 + (1 | batch) + (0 + x1 | sample) + (0 + x1 | batch)".to_string()));
        assert!(forward_candidates(&f, &StepConfig::default(), &d).unwrap().is_empty());
        let bad = StepConfig { group_candidates: vec!["nope".into()], ..Default::default() };
        assert!(forward_candidates(&f, &bad, &d).is_err());
    }

    #[test]
    fn candidates_are_strict_reductions_and_extensions() {
        let d = dataset();
        let f = parse_formula("y ~ x1 + (1 + x1 | batch) + (1 | sample)").unwrap();
        let params = |h: &ModelFormula| -> usize {
            h.randoms.iter().map(|t| if t.correlated { t.dim() * (t.dim() + 1) / 2 } else { t.dim() }).sum::<usize>() + h.smooths.len()
        };
        for g in backward_candidates(&f, &[], &Keep::default()) {
            assert!(params(&g) < params(&f), "{g}");
        }
        let c = StepConfig {
            group_candidates: vec!["batch".into(), "sample".into()],
            slope_candidates: vec!["x3".into()],
            max_slopes: 3,
            ..Default::default()
        };
        for g in forward_candidates(&f, &c, &d).unwrap() {
            assert!(params(&g) > params(&f), "{g}");
        }
    }
}
