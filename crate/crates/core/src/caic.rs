//! Corrected conditional AIC.
//!
//! For Gaussian models the effective degrees of freedom are
//! `n - tr(A)` plus a correction for the estimated covariance parameters,
//! obtained from the implicit function theorem: with `B` the Hessian of the
//! profiled criterion and `G` its cross derivative with respect to
//! parameters and response, `∂φ̂/∂y = -B⁻¹G`, and the correction is
//! `-Σ_j (B⁻¹G)_j · A W_j A y`.
//!
//! The covariance parameters are handled in the covariance-entry
//! parametrization `φ` (entries of `ΛΛ'` per block), in which
//! `W_j = Z D^(j) Z'` is exactly `∂V₀/∂φ_j`. The degrees of freedom do not
//! depend on the parametrization.
//!
//! Poisson and Bernoulli corrections are sums over per-observation refits.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::BlockSource;
use crate::error::{Error, Result};
use crate::estimation::{conditional_loglik, covariance_factor_blocks, fit_model, profiled_criterion, Family, FittedModel, Refitter};
use crate::formula::{reduce_by_component_names, ModelFormula};
use crate::optim::fd_gradient_hessian;

/// Default boundary tolerance on the diagonal of the relative covariance
/// factor (i.e. `1e-6 σ̂` on the absolute scale).
pub const BOUNDARY_TOL: f64 = 1e-6;

/// How the cross derivative `G` enters the Gaussian correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GConvention {
    /// Reproduces the published reference values: the term of `G` that
    /// stems from differentiating `y'Ay` enters with half weight.
    #[default]
    Reference,
    /// Exact implicit-function-theorem derivative.
    Exact,
}

#[derive(Debug, Clone)]
pub struct CaicOptions {
    pub boundary_tol: f64,
    pub convention: GConvention,
}

impl Default for CaicOptions {
    fn default() -> Self {
        CaicOptions { boundary_tol: BOUNDARY_TOL, convention: GConvention::Reference }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaicResult {
    pub cond_loglik: f64,
    pub df: f64,
    pub reduced_formula: Option<ModelFormula>,
    pub refitted: bool,
    pub caic: f64,
}

impl CaicResult {
    fn new(cond_loglik: f64, df: f64, reduced_formula: Option<ModelFormula>) -> Self {
        CaicResult {
            cond_loglik,
            df,
            refitted: reduced_formula.is_some(),
            reduced_formula,
            caic: -2.0 * cond_loglik + 2.0 * df,
        }
    }
}

/// A cAIC result together with the model it was computed on (the input
/// model, or its boundary-reduced refit).
#[derive(Debug, Clone)]
pub struct CaicOutcome {
    pub result: CaicResult,
    pub model: FittedModel,
}

/// Removes random-effect components whose covariance-factor diagonal is at
/// most `tol`, refitting until no such component remains. Returns the
/// final model and whether anything was removed.
pub fn delete_zero_components(m: &FittedModel, tol: f64) -> Result<(FittedModel, bool)> {
    let mut current = m.clone();
    let mut reduced = false;
    loop {
        let blocks = covariance_factor_blocks(&current);
        let mut kept: Vec<Vec<String>> = vec![Vec::new(); current.formula.randoms.len()];
        let mut any_dropped = false;
        for b in &blocks {
            if let BlockSource::Random(t) = b.source {
                for (c, name) in b.component_names.iter().enumerate() {
                    if b.factor[(c, c)].abs() > tol {
                        kept[t].push(name.clone());
                    } else {
                        any_dropped = true;
                    }
                }
            }
        }
        if !any_dropped {
            return Ok((current, reduced));
        }
        let formula = reduce_by_component_names(&current.formula, &kept)?;
        current = fit_model(&formula, current.data.clone(), current.family, &current.options).map_err(|e| {
            Error::Refit { formula: formula.to_string(), source: Box::new(e) }
        })?;
        reduced = true;
    }
}

fn require_gaussian(m: &FittedModel) -> Result<()> {
    if m.family != Family::Gaussian {
        return Err(Error::Unsupported(format!("operation needs a gaussian model, got {}", m.family.name())));
    }
    Ok(())
}

/// `V₀⁻¹ = I - C'C` with `C = L⁻¹Λ'Z'`.
pub fn scaled_precision(m: &FittedModel) -> Result<DMatrix<f64>> {
    require_gaussian(m)?;
    let c = random_projection(m)?;
    Ok(DMatrix::identity(m.n(), m.n()) - c.tr_mul(&c))
}

/// `C = L⁻¹Λ'Z'` (q × n).
pub fn random_projection(m: &FittedModel) -> Result<DMatrix<f64>> {
    let (n, q) = (m.n(), m.q());
    let zl = m.system.zl_values(&m.theta)?;
    let zlt = m.system.zl_matrix(&zl).transpose();
    let mut c = DMatrix::<f64>::zeros(q, n);
    let mut col = vec![0.0; q];
    for i in 0..n {
        col.iter_mut().for_each(|v| *v = 0.0);
        for (r, v) in zlt.column(i) {
            col[r] = v;
        }
        m.factor.solve_lower_in_place(&mut col);
        c.set_column(i, &DVector::from_column_slice(&col));
    }
    Ok(c)
}

/// `A = V₀⁻¹ - V₀⁻¹X (X'V₀⁻¹X)⁻¹ X'V₀⁻¹`, using `X'V₀⁻¹X = RX RX'`.
pub fn residual_projector(m: &FittedModel, v0inv: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_gaussian(m)?;
    let sol = m.system.solve(&m.theta, &m.y, None)?;
    let k = v0inv * &m.design.x;
    Ok(v0inv - &k * sol.rx.solve(&k.transpose()))
}

/// Covariance-entry parameters `φ` of every block from θ.
pub fn covariance_parameters(m: &FittedModel) -> Vec<f64> {
    let t = &m.design.template;
    let mut phi = vec![0.0; t.theta_dim];
    for b in &t.blocks {
        let f = b.factor(&m.theta);
        let d = b.dim;
        for c in 0..d {
            for r in c..d {
                phi[b.theta_index(r, c)] = (0..=c).map(|k| f[r * d + k] * f[c * d + k]).sum();
            }
        }
    }
    phi
}

/// θ from `φ` by per-block Cholesky; `None` if a block is not positive
/// semidefinite.
fn theta_from_phi(m: &FittedModel, phi: &[f64]) -> Option<Vec<f64>> {
    let t = &m.design.template;
    let mut theta = vec![0.0; t.theta_dim];
    for b in &t.blocks {
        let d = b.dim;
        let mut l = vec![0.0; d * d];
        for c in 0..d {
            let mut diag = phi[b.theta_index(c, c)];
            for k in 0..c {
                diag -= l[c * d + k] * l[c * d + k];
            }
            if diag < 0.0 {
                return None;
            }
            let lc = diag.sqrt();
            l[c * d + c] = lc;
            for r in (c + 1)..d {
                let mut v = phi[b.theta_index(r, c)];
                for k in 0..c {
                    v -= l[r * d + k] * l[c * d + k];
                }
                if lc == 0.0 {
                    if v.abs() > 0.0 {
                        return None;
                    }
                    l[r * d + c] = 0.0;
                } else {
                    l[r * d + c] = v / lc;
                }
            }
        }
        for c in 0..d {
            for r in c..d {
                theta[b.theta_index(r, c)] = l[r * d + c];
            }
        }
    }
    Some(theta)
}

/// Indices of `φ` that take part in the correction: all entries of blocks
/// whose factor diagonal is away from zero. Blocks on the boundary (e.g. a
/// smooth with zero variance) are held fixed.
pub fn free_parameters(m: &FittedModel, tol: f64) -> Vec<usize> {
    let t = &m.design.template;
    let mut out = Vec::new();
    for b in &t.blocks {
        let interior = (0..b.dim).all(|c| m.theta[b.theta_index(c, c)].abs() > tol);
        if interior {
            out.extend(b.theta_offset..b.theta_offset + b.theta_len());
        }
    }
    out
}

fn fd_steps(phi: &[f64], free: &[usize]) -> Vec<f64> {
    free.iter().map(|&j| (1e-4 * phi[j].abs()).max(1e-4)).collect()
}

/// `W_j = Z D^(j) Z'` for every free covariance parameter.
pub fn covariance_derivatives(m: &FittedModel) -> Result<Vec<DMatrix<f64>>> {
    require_gaussian(m)?;
    let free = free_parameters(m, BOUNDARY_TOL);
    Ok(free.iter().map(|&j| covariance_derivative(m, j)).collect())
}

fn covariance_derivative(m: &FittedModel, j: usize) -> DMatrix<f64> {
    let n = m.n();
    let t = &m.design.template;
    let (bi, r, c) = t.locate(j).expect("valid parameter index");
    let b = &t.blocks[bi];
    let z = &m.design.z;
    let mut w = DMatrix::<f64>::zeros(n, n);
    for l in 0..b.n_levels {
        let cr = b.col_offset + l * b.dim + r;
        let cc = b.col_offset + l * b.dim + c;
        let zr: Vec<(usize, f64)> = z.column(cr).collect();
        let zc: Vec<(usize, f64)> = z.column(cc).collect();
        for &(i, vi) in &zr {
            for &(k, vk) in &zc {
                w[(i, k)] += vi * vk;
                if r != c {
                    w[(k, i)] += vi * vk;
                }
            }
        }
    }
    w
}

/// Profiled criterion as a function of the free covariance parameters.
fn phi_criterion<'a>(m: &'a FittedModel, free: &'a [usize], y: &'a [f64]) -> impl FnMut(&[f64]) -> f64 + 'a {
    let base = covariance_parameters(m);
    move |z: &[f64]| {
        let mut phi = base.clone();
        for (k, &j) in free.iter().enumerate() {
            phi[j] = z[k];
        }
        match theta_from_phi(m, &phi) {
            Some(th) => profiled_criterion(&m.system, &th, y, m.reml).unwrap_or(f64::NAN),
            None => f64::NAN,
        }
    }
}

/// Hessian `B` of the profiled criterion in the free covariance parameters
/// by central differences. Fails unless `B` is positive definite.
pub fn criterion_hessian(m: &FittedModel) -> Result<DMatrix<f64>> {
    require_gaussian(m)?;
    let free = free_parameters(m, BOUNDARY_TOL);
    let phi = covariance_parameters(m);
    let z0: Vec<f64> = free.iter().map(|&j| phi[j]).collect();
    let h = fd_steps(&phi, &free);
    let mut f = phi_criterion(m, &free, &m.y);
    let f0 = f(&z0);
    let (_, hess) = fd_gradient_hessian(&mut f, &z0, f0, &h);
    let k = free.len();
    let b = DMatrix::from_fn(k, k, |i, j| 0.5 * (hess[i][j] + hess[j][i]));
    if b.iter().any(|v| !v.is_finite()) || (k > 0 && b.clone().cholesky().is_none()) {
        return Err(Error::Numerical(
            "criterion Hessian is not positive definite; a covariance parameter is at or near the boundary".into(),
        ));
    }
    Ok(b)
}

/// `A(φ) y` and `y'A(φ)y` from a penalized least-squares solve at `φ`.
fn projected_response(m: &FittedModel, phi: &[f64], y: &[f64]) -> Result<(Vec<f64>, f64)> {
    let theta = theta_from_phi(m, phi)
        .ok_or_else(|| Error::Numerical("covariance step left the positive semidefinite cone".into()))?;
    let sol = m.system.solve(&theta, y, None)?;
    let ay: Vec<f64> = y.iter().zip(&sol.eta).map(|(a, b)| a - b).collect();
    Ok((ay, sol.pwrss))
}

/// Cross derivative `G` (free parameters × n): central differences in `φ`
/// of the response gradient `2 (n - p_eff) A y / (y'Ay)` of the profiled
/// criterion.
pub fn criterion_cross_derivative(m: &FittedModel) -> Result<DMatrix<f64>> {
    require_gaussian(m)?;
    let free = free_parameters(m, BOUNDARY_TOL);
    let phi = covariance_parameters(m);
    let h = fd_steps(&phi, &free);
    let n = m.n();
    let dof = if m.reml { (n - m.p()) as f64 } else { n as f64 };
    let grad = |ph: &[f64]| -> Result<Vec<f64>> {
        let (ay, s) = projected_response(m, ph, &m.y)?;
        if !(s > 0.0) {
            return Err(Error::Numerical("y'Ay is not positive".into()));
        }
        Ok(ay.iter().map(|v| 2.0 * dof * v / s).collect())
    };
    let mut g = DMatrix::<f64>::zeros(free.len(), n);
    for (k, &j) in free.iter().enumerate() {
        let mut plus = phi.clone();
        plus[j] += h[k];
        let mut minus = phi.clone();
        minus[j] -= h[k];
        let (gp, gm) = (grad(&plus)?, grad(&minus)?);
        for i in 0..n {
            g[(k, i)] = (gp[i] - gm[i]) / (2.0 * h[k]);
        }
    }
    Ok(g)
}

/// Pieces of the Gaussian correction.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCorrection {
    /// `n - tr(A)`
    pub hat_trace: f64,
    /// Covariance-parameter correction added to `hat_trace`.
    pub correction: f64,
    /// `hat_trace + correction`: the trace of `∂ŷ/∂y`.
    pub effective_df: f64,
    /// Degrees of freedom used in the criterion: `effective_df + 1` for
    /// the residual variance.
    pub df: f64,
}

pub fn gaussian_bias_correction(m: &FittedModel, convention: GConvention) -> Result<GaussianCorrection> {
    require_gaussian(m)?;
    let n = m.n();
    let yy: f64 = m.y.iter().map(|v| v * v).sum();
    let rss: f64 = m.y.iter().zip(&m.eta).map(|(a, b)| (a - b).powi(2)).sum();
    if rss <= 1e-20 * yy.max(f64::MIN_POSITIVE) {
        return Err(Error::Numerical("the response is fitted exactly; the residual variance is zero".into()));
    }
    let v0inv = scaled_precision(m)?;
    let a = residual_projector(m, &v0inv)?;
    let hat_trace = n as f64 - a.trace();
    let free = free_parameters(m, BOUNDARY_TOL);
    let mut correction = 0.0;
    if !free.is_empty() {
        let b = criterion_hessian(m)?;
        let mut g = criterion_cross_derivative(m)?;
        let y = DVector::from_column_slice(&m.y);
        let ay = &a * &y;
        let s = y.dot(&ay);
        let dof = if m.reml { (n - m.p()) as f64 } else { n as f64 };
        let wa_y: Vec<DVector<f64>> = free.iter().map(|&j| covariance_derivative(m, j) * &ay).collect();
        let awa_y: Vec<DVector<f64>> = wa_y.iter().map(|v| &a * v).collect();
        if convention == GConvention::Reference {
            for (k, v) in wa_y.iter().enumerate() {
                let quad = ay.dot(v) / (s * s);
                for i in 0..n {
                    g[(k, i)] -= dof * ay[i] * quad;
                }
            }
        }
        let chol = b.cholesky().expect("checked positive definite");
        let gamma = chol.solve(&g);
        for (k, v) in awa_y.iter().enumerate() {
            correction -= gamma.row(k).transpose().dot(v);
        }
    }
    let effective_df = hat_trace + correction;
    Ok(GaussianCorrection { hat_trace, correction, effective_df, df: effective_df + 1.0 })
}

/// `tr(∂ŷ/∂y)` by one-sided differences: each observation is perturbed by
/// `h` and the model refitted. Default `h = 1e-4 sd(y)`.
pub fn numeric_bias_correction(m: &FittedModel, h: Option<f64>) -> Result<f64> {
    require_gaussian(m)?;
    let n = m.n();
    let h = h.unwrap_or_else(|| 1e-4 * sd(&m.y));
    let refitter = Refitter::new(m);
    let terms: Vec<Option<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut y = m.y.clone();
            y[i] += h;
            refitter.refit(&y).ok().filter(|r| r.converged).map(|r| (r.eta[i] - m.eta[i]) / h)
        })
        .collect();
    let failed = terms.iter().filter(|t| t.is_none()).count();
    if failed * 20 > n {
        return Err(Error::Numerical(format!("{failed} of {n} perturbed refits failed")));
    }
    // failed terms are replaced by the mean of the successful ones
    let ok: Vec<f64> = terms.iter().flatten().copied().collect();
    let mean = ok.iter().sum::<f64>() / ok.len() as f64;
    Ok(terms.iter().map(|t| t.unwrap_or(mean)).sum())
}

fn sd(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Refits on each perturbed response and returns `η̂_i` per index. A
/// warm-started refit that fails or does not converge is redone from a cold
/// start.
fn perturbed_predictors<F>(m: &FittedModel, indices: &[usize], perturb: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let refitter = Refitter::new(m);
    let results: Vec<std::result::Result<f64, (usize, Error)>> = indices
        .par_iter()
        .map(|&i| {
            let mut y = m.y.clone();
            perturb(i, &mut y);
            let warm = refitter.refit(&y);
            let fit = match warm {
                Ok(r) if r.converged => Ok(r),
                _ => refitter.refit_cold(&y).and_then(|r| {
                    if r.converged {
                        Ok(r)
                    } else {
                        Err(Error::Numerical("refit did not converge".into()))
                    }
                }),
            };
            fit.map(|r| r.eta[i]).map_err(|e| (i, e))
        })
        .collect();
    let failed: Vec<usize> = results.iter().filter_map(|r| r.as_ref().err().map(|(i, _)| *i + 1)).collect();
    if !failed.is_empty() {
        return Err(Error::Numerical(format!("refits failed for observations {failed:?}")));
    }
    Ok(results.into_iter().map(|r| r.expect("checked")).collect())
}

/// `Σ_{y_i > 0} y_i (η̂_i(y) - η̂_i(y - e_i))`.
pub fn poisson_bias_correction(m: &FittedModel) -> Result<f64> {
    if m.family != Family::Poisson {
        return Err(Error::Unsupported("poisson correction on a non-poisson model".into()));
    }
    let idx: Vec<usize> = (0..m.n()).filter(|&i| m.y[i] > 0.0).collect();
    let eta_dec = perturbed_predictors(m, &idx, |i, y| y[i] -= 1.0)?;
    Ok(idx.iter().zip(&eta_dec).map(|(&i, e)| m.y[i] * (m.eta[i] - e)).sum())
}

/// `Σ_i μ̂_i (1 - μ̂_i) (η̂_i(y_i = 1) - η̂_i(y_i = 0))`, one refit with `y_i`
/// flipped per observation.
pub fn bernoulli_bias_correction(m: &FittedModel) -> Result<f64> {
    if m.family != Family::Bernoulli {
        return Err(Error::Unsupported("bernoulli correction on a non-bernoulli model".into()));
    }
    let idx: Vec<usize> = (0..m.n()).collect();
    let eta_flip = perturbed_predictors(m, &idx, |i, y| y[i] = 1.0 - y[i])?;
    Ok(idx
        .iter()
        .zip(&eta_flip)
        .map(|(&i, &ef)| {
            let mu = m.fitted[i];
            let sign = 1.0 - 2.0 * m.y[i];
            mu * (1.0 - mu) * sign * (ef - m.eta[i])
        })
        .sum())
}

/// Conventional AIC of a model without random effects. Gaussian models use
/// the restricted log-likelihood and count the residual variance.
pub fn classical_aic(m: &FittedModel) -> Result<f64> {
    if m.has_random_effects() {
        return Err(Error::Unsupported("classical AIC needs a model without random effects".into()));
    }
    let p = m.p() as f64;
    Ok(match m.family {
        Family::Gaussian => {
            let crit = if m.reml {
                m.criterion
            } else {
                profiled_criterion(&m.system, &[], &m.y, true)?
            };
            crit + 2.0 * (p + 1.0)
        }
        f => f.deviance_sum(&m.y, &m.eta) + 2.0 * p,
    })
}

/// Log-likelihood and degrees of freedom for a model without random
/// effects. The Gaussian log-likelihood is evaluated at the restricted
/// variance estimate.
fn linear_model_terms(m: &FittedModel) -> (f64, f64) {
    match m.family {
        Family::Gaussian => {
            let n = m.n();
            let rss: f64 = m.y.iter().zip(&m.eta).map(|(a, b)| (a - b).powi(2)).sum();
            let s2 = rss / (n - m.p()) as f64;
            let ll = -0.5 * n as f64 * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * rss / s2;
            (ll, m.p() as f64)
        }
        _ => (conditional_loglik(m), m.p() as f64),
    }
}

pub fn caic(m: &FittedModel) -> Result<CaicResult> {
    caic_with(m, &CaicOptions::default()).map(|o| o.result)
}

pub fn caic_with(m: &FittedModel, opts: &CaicOptions) -> Result<CaicOutcome> {
    let (model, reduced) = if m.family == Family::Gaussian {
        delete_zero_components(m, opts.boundary_tol)?
    } else {
        (m.clone(), false)
    };
    let reduced_formula = reduced.then(|| model.formula.clone());
    let result = if !model.has_random_effects() {
        let (ll, df) = linear_model_terms(&model);
        CaicResult::new(ll, df, reduced_formula)
    } else {
        let ll = conditional_loglik(&model);
        let df = match model.family {
            Family::Gaussian => gaussian_bias_correction(&model, opts.convention)?.df,
            Family::Poisson => poisson_bias_correction(&model)?,
            Family::Bernoulli => bernoulli_bias_correction(&model)?,
        };
        CaicResult::new(ll, df, reduced_formula)
    };
    Ok(CaicOutcome { result, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, Dataset};
    use crate::estimation::{fit_lmm, FitOptions};
    use crate::formula::parse_formula;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::sync::Arc;

    fn toy(n_groups: usize, per: usize, sd_b: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        let b: Vec<f64> = (0..n_groups).map(|_| sd_b * nrm.sample(&mut rng)).collect();
        let mut y = Vec::new();
        let mut x = Vec::new();
        let mut g = Vec::new();
        for k in 0..n_groups {
            for j in 0..per {
                let xv = j as f64 / per as f64;
                x.push(xv);
                y.push(1.0 + 0.5 * xv + b[k] + nrm.sample(&mut rng));
                g.push(format!("g{k}"));
            }
        }
        Dataset::new()
            .with_column("y", Column::numeric(y))
            .unwrap()
            .with_column("x", Column::numeric(x))
            .unwrap()
            .with_column("g", Column::categorical(&g))
            .unwrap()
    }

    #[test]
    fn phi_theta_round_trip() {
        let ds = toy(5, 6, 1.0, 1);
        let mut m = fit_lmm(&parse_formula("y ~ x + (x | g)").unwrap(), &ds, true).unwrap();
        m.theta = vec![0.8, -0.4, 0.3];
        let phi = covariance_parameters(&m);
        let back = theta_from_phi(&m, &phi).unwrap();
        for (a, b) in back.iter().zip(&m.theta) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn small_model_matrices_match_dense_oracle() {
        let ds = toy(3, 2, 0.0, 2).with_numeric_replaced("y", vec![0.0, 0.9, 5.0, 5.4, 10.0, 10.7]).unwrap();
        let m = fit_lmm(&parse_formula("y ~ (1 | g)").unwrap(), &ds, true).unwrap();
        let v0inv = scaled_precision(&m).unwrap();
        let z = m.design.z.to_dense();
        let th = m.theta[0];
        let v0 = DMatrix::from_fn(6, 6, |i, j| {
            let zz: f64 = (0..3).map(|k| z[i][k] * z[j][k]).sum();
            th * th * zz + if i == j { 1.0 } else { 0.0 }
        });
        let dense = v0.clone().try_inverse().unwrap();
        assert!((&v0inv - &dense).amax() < 1e-10);
        let a = residual_projector(&m, &v0inv).unwrap();
        assert!((&a * &m.design.x).amax() < 1e-10);
        let w = covariance_derivatives(&m).unwrap();
        assert_eq!(w.len(), 1);
        let zz = DMatrix::from_fn(6, 6, |i, j| (0..3).map(|k| z[i][k] * z[j][k]).sum::<f64>());
        assert!((&w[0] - zz).amax() < 1e-14);
    }

    #[test]
    fn derivatives_match_finite_differences_of_v0() {
        let ds = toy(4, 3, 1.0, 3);
        let m = fit_lmm(&parse_formula("y ~ x + (x | g)").unwrap(), &ds, true).unwrap();
        let w = covariance_derivatives(&m).unwrap();
        let phi = covariance_parameters(&m);
        let z = m.design.z.to_dense();
        let v0 = |ph: &[f64]| {
            let th = theta_from_phi(&m, ph).unwrap();
            let lam = crate::design::lambda_factor(&m.design.template, &th).unwrap().to_dense();
            let n = m.n();
            let q = m.q();
            let zl = DMatrix::from_fn(n, q, |i, j| (0..q).map(|k| z[i][k] * lam[k][j]).sum::<f64>());
            DMatrix::identity(n, n) + &zl * zl.transpose()
        };
        let h = 1e-5;
        for (j, wj) in w.iter().enumerate() {
            let mut p = phi.clone();
            p[j] += h;
            let mut mm = phi.clone();
            mm[j] -= h;
            let fd: DMatrix<f64> = (v0(&p) - v0(&mm)) / (2.0 * h);
            assert!((fd - wj).amax() < 1e-6, "W_{j}");
        }
    }

    #[test]
    fn cross_derivative_matches_double_differences() {
        let ds = toy(2, 5, 1.5, 4);
        let m = fit_lmm(&parse_formula("y ~ (1 | g)").unwrap(), &ds, true).unwrap();
        let g = criterion_cross_derivative(&m).unwrap();
        let free = free_parameters(&m, BOUNDARY_TOL);
        let phi = covariance_parameters(&m);
        let (hp, hy) = (1e-4, 1e-4);
        for i in 0..m.n() {
            let crit = |dp: f64, dy: f64| {
                let mut y = m.y.clone();
                y[i] += dy;
                let mut f = phi_criterion(&m, &free, &y);
                f(&[phi[0] + dp])
            };
            let fd = (crit(hp, hy) - crit(hp, -hy) - crit(-hp, hy) + crit(-hp, -hy)) / (4.0 * hp * hy);
            assert!((fd - g[(0, i)]).abs() < 1e-4 * (1.0 + fd.abs()), "i={i}: {fd} vs {}", g[(0, i)]);
        }
    }

    #[test]
    fn analytic_matches_numeric_on_random_intercepts() {
        let ds = toy(5, 6, 2.0, 11);
        let m = fit_lmm(&parse_formula("y ~ x + (1 | g)").unwrap(), &ds, true).unwrap();
        assert!(m.theta[0] > 1e-3);
        let exact = gaussian_bias_correction(&m, GConvention::Exact).unwrap();
        let numeric = numeric_bias_correction(&m, None).unwrap();
        assert!((exact.effective_df - numeric).abs() < 1e-2, "{exact:?} vs {numeric}");
        assert!(exact.hat_trace >= m.p() as f64 && exact.hat_trace <= (m.p() + m.q()) as f64);
    }

    #[test]
    fn numeric_df_without_random_effects_is_p() {
        let ds = toy(3, 5, 1.0, 5);
        let m = fit_lmm(&parse_formula("y ~ x").unwrap(), &ds, true).unwrap();
        let df = numeric_bias_correction(&m, None).unwrap();
        assert!((df - 2.0).abs() < 1e-4);
    }

    #[test]
    fn result_identity_and_linear_fallback() {
        let ds = toy(5, 4, 0.0, 6);
        let y: Vec<f64> = (0..20).map(|i| (i % 4) as f64 + 0.1 * (i / 4) as f64).collect();
        // identical group means give a between-group variance estimate of zero
        let ds = ds.with_numeric_replaced("y", y).unwrap();
        let f = parse_formula("y ~ (1 | g)").unwrap();
        let m = fit_lmm(&f, &ds, true).unwrap();
        let out = caic_with(&m, &CaicOptions::default()).unwrap();
        assert_eq!(out.result.caic, -2.0 * out.result.cond_loglik + 2.0 * out.result.df);
        assert!(out.result.refitted);
        assert_eq!(out.result.reduced_formula.as_ref().unwrap().to_string(), "y ~ 1");
        let lm = crate::estimation::fit_model(&parse_formula("y ~ 1").unwrap(), Arc::new(ds.clone()), Family::Gaussian, &FitOptions::default()).unwrap();
        assert!((caic(&lm).unwrap().caic - out.result.caic).abs() < 1e-6);
    }

    #[test]
    fn poisson_all_zero_has_zero_df() {
        let ds = toy(4, 5, 1.0, 8).with_numeric_replaced("y", vec![0.0; 20]).unwrap();
        let m = crate::estimation::fit_model(&parse_formula("y ~ (1 | g)").unwrap(), Arc::new(ds), Family::Poisson, &FitOptions::default()).unwrap();
        assert!(m.fitted.iter().all(|&mu| mu < 1e-6));
        assert_eq!(poisson_bias_correction(&m).unwrap(), 0.0);
    }
}
