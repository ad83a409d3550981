//! Model fitting: profiled REML/ML for Gaussian responses and the Laplace
//! approximation for Poisson and Bernoulli responses.

mod family;
pub mod pirls;
pub mod pls;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

pub use family::Family;
pub use pls::{PlsSolution, PlsSystem};

use crate::data::Dataset;
use crate::design::{build_design, BlockSource, DesignMatrices};
use crate::error::{Error, Result};
use crate::formula::ModelFormula;
use crate::optim::{chord_newton, fd_gradient_hessian, minimize_bounded, newton_polish, Minimum, SimplexOptions};
use crate::sparse::CholeskyFactor;

/// Diagonal entries of θ below this are candidates for the boundary.
const SNAP_TOL: f64 = 1e-4;
/// Relative criterion increase accepted when snapping to the boundary.
const SNAP_SLACK: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// REML for Gaussian models; ignored otherwise.
    pub reml: bool,
    pub simplex: SimplexOptions<f64>,
    /// Newton refinement iterations after the simplex search.
    pub polish_iterations: usize,
    pub pirls_max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            reml: true,
            simplex: SimplexOptions::default(),
            polish_iterations: 6,
            pirls_max_iter: 60,
        }
    }
}

impl FitOptions {
    pub fn ml() -> Self {
        FitOptions { reml: false, ..Default::default() }
    }
}

/// A fitted (generalized) linear mixed model. Immutable once built.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub formula: ModelFormula,
    pub family: Family,
    pub data: Arc<Dataset>,
    pub design: Arc<DesignMatrices>,
    pub system: Arc<PlsSystem>,
    pub y: Vec<f64>,
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    /// Spherical random effects, `u = Λ s`.
    pub s: Vec<f64>,
    pub u: Vec<f64>,
    pub eta: Vec<f64>,
    /// `h(η)`
    pub fitted: Vec<f64>,
    /// Residual variance; 1 for Poisson and Bernoulli.
    pub sigma2: f64,
    pub reml: bool,
    /// Gaussian: −2 × profiled (restricted) log-likelihood. Otherwise the
    /// Laplace approximation to −2 × marginal log-likelihood.
    pub criterion: f64,
    pub converged: bool,
    pub evaluations: usize,
    /// Cholesky factor of `Λ'Z'WZΛ + I` at the optimum.
    pub factor: CholeskyFactor<f64>,
    pub options: FitOptions,
}

/// Standard deviation / correlation summary of one random-effect term.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceComponent {
    pub group: String,
    pub names: Vec<String>,
    pub sds: Vec<f64>,
    /// Row-major lower triangle of correlations, `(i, j)` with `i > j`.
    pub correlations: Vec<(usize, usize, f64)>,
}

/// Per-level relative covariance factor of one block, as inspected for
/// boundary deletion.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorBlock {
    pub name: String,
    pub source: BlockSource,
    pub component_names: Vec<String>,
    pub factor: DMatrix<f64>,
}

impl FittedModel {
    pub fn n(&self) -> usize {
        self.design.n
    }

    pub fn p(&self) -> usize {
        self.design.p
    }

    pub fn q(&self) -> usize {
        self.design.q
    }

    pub fn theta_dim(&self) -> usize {
        self.design.theta_dim()
    }

    pub fn has_random_effects(&self) -> bool {
        self.q() > 0
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// Marginal AIC: criterion plus twice the number of parameters.
    pub fn marginal_aic(&self) -> f64 {
        let scale = usize::from(self.family == Family::Gaussian);
        self.criterion + 2.0 * (self.p() + self.theta_dim() + scale) as f64
    }

    pub fn variance_components(&self) -> Vec<VarianceComponent> {
        let sigma = self.sigma();
        covariance_factor_blocks(self)
            .into_iter()
            .map(|b| {
                let cov = &b.factor * b.factor.transpose() * (sigma * sigma);
                let d = cov.nrows();
                let sds: Vec<f64> = (0..d).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
                let mut correlations = Vec::new();
                for i in 0..d {
                    for j in 0..i {
                        let den = sds[i] * sds[j];
                        correlations.push((i, j, if den > 0.0 { cov[(i, j)] / den } else { 0.0 }));
                    }
                }
                VarianceComponent { group: b.name, names: b.component_names, sds, correlations }
            })
            .collect()
    }

    /// Parameters searched by the outer optimizer: θ for Gaussian models,
    /// (θ, β) otherwise.
    fn outer_point(&self) -> Vec<f64> {
        match self.family {
            Family::Gaussian => self.theta.clone(),
            _ => self.theta.iter().chain(&self.beta).copied().collect(),
        }
    }

    fn outer_lower(&self) -> Vec<f64> {
        let mut lb = self.design.template.lower_bounds::<f64>();
        if self.family != Family::Gaussian {
            lb.extend(std::iter::repeat(f64::NEG_INFINITY).take(self.p()));
        }
        lb
    }
}

/// Builds the design and fits `formula` to `data`.
pub fn fit_model(formula: &ModelFormula, data: Arc<Dataset>, family: Family, opts: &FitOptions) -> Result<FittedModel> {
    let design = Arc::new(build_design(formula, &data)?);
    family.validate(&design.y)?;
    let system = Arc::new(PlsSystem::new(design.clone())?);
    let ctx = Context { formula, data: &data, design: &design, system: &system, family, opts };
    let y = design.y.clone();
    match family {
        Family::Gaussian => ctx.fit_gaussian(y, None),
        _ => ctx.fit_glmm(y, None),
    }
}

/// Gaussian fit by REML (default) or ML.
pub fn fit_lmm(formula: &ModelFormula, data: &Dataset, reml: bool) -> Result<FittedModel> {
    let opts = FitOptions { reml, ..Default::default() };
    fit_model(formula, Arc::new(data.clone()), Family::Gaussian, &opts)
}

/// Poisson or Bernoulli fit by the Laplace approximation.
pub fn fit_glmm(formula: &ModelFormula, data: &Dataset, family: Family) -> Result<FittedModel> {
    if family == Family::Gaussian {
        return Err(Error::Unsupported("fit_glmm needs a non-Gaussian family".into()));
    }
    fit_model(formula, Arc::new(data.clone()), family, &FitOptions::default())
}

/// −2 × profiled (restricted) Gaussian log-likelihood at θ.
pub fn profiled_criterion(sys: &PlsSystem, theta: &[f64], y: &[f64], reml: bool) -> Result<f64> {
    let sol = sys.solve(theta, y, None)?;
    let d = sys.design();
    Ok(pls::profiled_from_solution(&sol, d.n, d.p, reml))
}

/// Penalized least squares at θ with optional weights.
pub fn pls_solve(sys: &PlsSystem, theta: &[f64], y: &[f64], weights: Option<&[f64]>) -> Result<PlsSolution> {
    sys.solve(theta, y, weights)
}

/// `Σ log f(y_i | μ̂_i)`, with the fitted residual variance for Gaussian
/// models.
pub fn conditional_loglik(m: &FittedModel) -> f64 {
    match m.family {
        Family::Gaussian => {
            let n = m.n() as f64;
            let rss: f64 = m.y.iter().zip(&m.eta).map(|(a, b)| (a - b).powi(2)).sum();
            -0.5 * n * (2.0 * std::f64::consts::PI * m.sigma2).ln() - 0.5 * rss / m.sigma2
        }
        f => -0.5 * f.deviance_sum(&m.y, &m.eta),
    }
}

/// Relative covariance factor of every block at θ̂, with component names.
pub fn covariance_factor_blocks(m: &FittedModel) -> Vec<FactorBlock> {
    m.design
        .template
        .blocks
        .iter()
        .map(|b| {
            let f = b.factor(&m.theta);
            FactorBlock {
                name: b.name.clone(),
                source: b.source.clone(),
                component_names: b.component_names.clone(),
                factor: DMatrix::from_row_slice(b.dim, b.dim, &f),
            }
        })
        .collect()
}

/// Refits `m` to a new response, warm-started at its optimum.
pub fn refit(m: &FittedModel, new_y: &[f64]) -> Result<FittedModel> {
    Refitter::new(m).refit(new_y)
}

/// Repeated refits of one model. The Hessian of the outer objective at the
/// original optimum is computed once and drives a chord-Newton search for
/// every new response; a full simplex search is the fallback.
#[derive(Debug)]
pub struct Refitter<'a> {
    model: &'a FittedModel,
    hessian: Option<Vec<Vec<f64>>>,
}

impl<'a> Refitter<'a> {
    pub fn new(model: &'a FittedModel) -> Self {
        let x = model.outer_point();
        let hessian = if x.is_empty() {
            None
        } else {
            let ctx = Context::of(model);
            let mut f = ctx.objective(&model.y, model.s.clone());
            let h: Vec<f64> = x.iter().map(|v| 1e-4 * v.abs().max(1.0)).collect();
            let fx = f(&x);
            let (_, hess) = fd_gradient_hessian(&mut f, &x, fx, &h);
            Some(hess)
        };
        Refitter { model, hessian }
    }

    pub fn model(&self) -> &FittedModel {
        self.model
    }

    pub fn refit(&self, new_y: &[f64]) -> Result<FittedModel> {
        let m = self.model;
        if new_y.len() != m.n() {
            return Err(Error::Data(format!("response has length {}, expected {}", new_y.len(), m.n())));
        }
        m.family.validate(new_y)?;
        let ctx = Context::of(m);
        let y = new_y.to_vec();
        let start = m.outer_point();
        if start.is_empty() {
            return match m.family {
                Family::Gaussian => ctx.fit_gaussian(y, None),
                _ => ctx.fit_glmm(y, Some((m.theta.clone(), m.beta.clone(), m.s.clone()))),
            };
        }
        let lower = m.outer_lower();
        let hess = self.hessian.as_ref().expect("hessian for non-empty parameter vector");
        let chord = {
            let mut f = ctx.objective(&y, m.s.clone());
            chord_newton(&mut f, &start, &lower, hess, 40, 1e-9)
        };
        let min = if chord.converged {
            chord
        } else {
            let mut opts = m.options.simplex.clone();
            opts.initial_step = 0.1;
            let mut f = ctx.objective(&y, m.s.clone());
            let nm = minimize_bounded(&mut f, &chord.x, &lower, &opts);
            let best = if nm.value <= chord.value { nm } else { chord };
            newton_polish(&mut f, &best, &lower, m.options.polish_iterations)
        };
        ctx.finalize(y, min, m.s.clone())
    }

    /// Cold refit from the model's default starting values.
    pub fn refit_cold(&self, new_y: &[f64]) -> Result<FittedModel> {
        let m = self.model;
        m.family.validate(new_y)?;
        let ctx = Context::of(m);
        match m.family {
            Family::Gaussian => ctx.fit_gaussian(new_y.to_vec(), None),
            _ => ctx.fit_glmm(new_y.to_vec(), None),
        }
    }
}

/// Everything fixed across fits of one design.
struct Context<'a> {
    formula: &'a ModelFormula,
    data: &'a Arc<Dataset>,
    design: &'a Arc<DesignMatrices>,
    system: &'a Arc<PlsSystem>,
    family: Family,
    opts: &'a FitOptions,
}

impl<'a> Context<'a> {
    fn of(m: &'a FittedModel) -> Self {
        Context {
            formula: &m.formula,
            data: &m.data,
            design: &m.design,
            system: &m.system,
            family: m.family,
            opts: &m.options,
        }
    }

    fn theta_dim(&self) -> usize {
        self.design.theta_dim()
    }

    /// Outer objective as a closure over the optimized parameters. For
    /// GLMMs the conditional modes are warm-started from the best point
    /// seen so far.
    fn objective<'b>(&'b self, y: &'b [f64], s0: Vec<f64>) -> Box<dyn FnMut(&[f64]) -> f64 + 'b> {
        let reml = self.opts.reml;
        match self.family {
            Family::Gaussian => Box::new(move |th: &[f64]| {
                profiled_criterion(self.system, th, y, reml).unwrap_or(f64::INFINITY)
            }),
            fam => {
                let k = self.theta_dim();
                let mut warm = s0;
                let mut best = f64::INFINITY;
                let max_iter = self.opts.pirls_max_iter;
                Box::new(move |x: &[f64]| {
                    let (th, beta) = x.split_at(k);
                    let Ok(zl) = self.system.zl_values(th) else { return f64::INFINITY };
                    match pirls::pirls_random(self.system, fam, y, &zl, beta, &warm, max_iter) {
                        Ok(st) => {
                            let v = st.laplace();
                            if v < best {
                                best = v;
                                warm = st.s;
                            }
                            v
                        }
                        Err(_) => f64::INFINITY,
                    }
                })
            }
        }
    }

    fn fit_gaussian(&self, y: Vec<f64>, start: Option<Vec<f64>>) -> Result<FittedModel> {
        let k = self.theta_dim();
        let min = if k == 0 {
            let v = profiled_criterion(self.system, &[], &y, self.opts.reml)?;
            Minimum { x: vec![], value: v, evals: 1, converged: true }
        } else {
            let lower = self.design.template.lower_bounds::<f64>();
            let x0 = start.unwrap_or_else(|| self.design.template.initial_theta());
            let mut f = self.objective(&y, Vec::new());
            let nm = minimize_bounded(&mut f, &x0, &lower, &self.opts.simplex);
            let polished = newton_polish(&mut f, &nm, &lower, self.opts.polish_iterations);
            self.snap_to_boundary(&mut f, polished)
        };
        self.finalize(y, min, Vec::new())
    }

    /// Sets blocks whose diagonal is within `SNAP_TOL` of zero to exactly
    /// zero when that leaves the criterion unchanged up to rounding.
    fn snap_to_boundary(&self, f: &mut dyn FnMut(&[f64]) -> f64, mut min: Minimum<f64>) -> Minimum<f64> {
        for b in &self.design.template.blocks {
            let diag_small = (0..b.dim).all(|c| min.x[b.theta_index(c, c)].abs() < SNAP_TOL);
            let range = b.theta_offset..b.theta_offset + b.theta_len();
            if !diag_small || min.x[range.clone()].iter().all(|&v| v == 0.0) {
                continue;
            }
            let mut x = min.x.clone();
            x[range].iter_mut().for_each(|v| *v = 0.0);
            let v = f(&x);
            min.evals += 1;
            if v <= min.value + SNAP_SLACK * min.value.abs().max(1.0) {
                min.x = x;
                min.value = v;
            }
        }
        min
    }

    fn fit_glmm(&self, y: Vec<f64>, start: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>) -> Result<FittedModel> {
        let (k, p, q) = (self.theta_dim(), self.design.p, self.design.q);
        let fam = self.family;
        let max_iter = self.opts.pirls_max_iter;
        let beta_glm = match &start {
            Some((_, b, _)) => b.clone(),
            None => self.glm_start(&y)?,
        };
        if k == 0 {
            let st = pirls::pirls_joint(self.system, fam, &y, &[], &beta_glm, &[], 200)?;
            let x = st.beta.clone();
            let min = Minimum { x, value: st.laplace(), evals: st.iterations, converged: st.converged };
            return self.finalize(y, min, Vec::new());
        }
        let lower_theta = self.design.template.lower_bounds::<f64>();
        let (theta1, beta1, s1, evals1) = match start {
            Some((t, b, s)) => (t, b, s, 0),
            None => {
                // stage 1: θ only, β inside the penalized IRLS
                let mut warm_b = beta_glm;
                let mut warm_s = vec![0.0; q];
                let mut best = f64::INFINITY;
                let mut f1 = |th: &[f64]| -> f64 {
                    let Ok(zl) = self.system.zl_values(th) else { return f64::INFINITY };
                    match pirls::pirls_joint(self.system, fam, &y, &zl, &warm_b, &warm_s, max_iter) {
                        Ok(st) => {
                            let v = st.laplace();
                            if v < best {
                                best = v;
                                warm_b = st.beta;
                                warm_s = st.s;
                            }
                            v
                        }
                        Err(_) => f64::INFINITY,
                    }
                };
                let x0 = self.design.template.initial_theta();
                let m1 = minimize_bounded(&mut f1, &x0, &lower_theta, &self.opts.simplex);
                let zl = self.system.zl_values(&m1.x)?;
                let st = pirls::pirls_joint(self.system, fam, &y, &zl, &warm_b, &warm_s, max_iter)?;
                (m1.x, st.beta, st.s, m1.evals)
            }
        };
        // stage 2: joint search over (θ, β)
        let mut lower = lower_theta;
        lower.extend(std::iter::repeat(f64::NEG_INFINITY).take(p));
        let x0: Vec<f64> = theta1.iter().chain(&beta1).copied().collect();
        let mut f = self.objective(&y, s1.clone());
        let nm = minimize_bounded(&mut f, &x0, &lower, &self.opts.simplex);
        let mut min = newton_polish(&mut f, &nm, &lower, self.opts.polish_iterations);
        min.evals += evals1;
        drop(f);
        self.finalize(y, min, s1)
    }

    /// Fixed-effects start: least squares of `X` on the linked, smoothed
    /// response.
    fn glm_start(&self, y: &[f64]) -> Result<Vec<f64>> {
        let z: Vec<f64> = y
            .iter()
            .map(|&v| match self.family {
                Family::Poisson => (v + 0.1).ln(),
                Family::Bernoulli => self.family.link((v + 0.5) / 2.0),
                Family::Gaussian => v,
            })
            .collect();
        let x = &self.design.x;
        let xtx = x.tr_mul(x);
        let chol = xtx
            .cholesky()
            .ok_or_else(|| Error::Design("fixed-effects design is rank deficient".into()))?;
        Ok(chol.solve(&x.tr_mul(&DVector::from_vec(z))).iter().copied().collect())
    }

    fn finalize(&self, y: Vec<f64>, min: Minimum<f64>, s_warm: Vec<f64>) -> Result<FittedModel> {
        let (n, p, k) = (self.design.n, self.design.p, self.theta_dim());
        match self.family {
            Family::Gaussian => {
                let theta = min.x.clone();
                let sol = self.system.solve(&theta, &y, None)?;
                let dof = if self.opts.reml { n - p } else { n };
                let sigma2 = sol.pwrss / dof as f64;
                let criterion = pls::profiled_from_solution(&sol, n, p, self.opts.reml);
                Ok(FittedModel {
                    formula: self.formula.clone(),
                    family: self.family,
                    data: self.data.clone(),
                    design: self.design.clone(),
                    system: self.system.clone(),
                    fitted: sol.eta.clone(),
                    y,
                    theta,
                    beta: sol.beta,
                    s: sol.s,
                    u: sol.u,
                    eta: sol.eta,
                    sigma2,
                    reml: self.opts.reml,
                    criterion,
                    converged: min.converged,
                    evaluations: min.evals,
                    factor: sol.factor,
                    options: self.opts.clone(),
                })
            }
            fam => {
                let (theta, beta) = min.x.split_at(k);
                let zl = self.system.zl_values(theta)?;
                let s0 = if s_warm.len() == self.design.q { s_warm } else { vec![0.0; self.design.q] };
                let st = if k == 0 {
                    pirls::pirls_joint(self.system, fam, &y, &zl, beta, &s0, 200)?
                } else {
                    pirls::pirls_random(self.system, fam, &y, &zl, beta, &s0, self.opts.pirls_max_iter)?
                };
                let u = self.system.lambda_mul(theta, &st.s);
                let fitted = st.eta.iter().map(|&e| fam.linkinv(e)).collect();
                Ok(FittedModel {
                    formula: self.formula.clone(),
                    family: fam,
                    data: self.data.clone(),
                    design: self.design.clone(),
                    system: self.system.clone(),
                    y,
                    theta: theta.to_vec(),
                    criterion: st.laplace(),
                    converged: min.converged && st.converged,
                    beta: st.beta,
                    s: st.s,
                    u,
                    eta: st.eta,
                    fitted,
                    sigma2: 1.0,
                    reml: false,
                    evaluations: min.evals,
                    factor: st.factor,
                    options: self.opts.clone(),
                })
            }
        }
    }
}
