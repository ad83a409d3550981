//! Penalized iteratively reweighted least squares for canonical-link GLMMs.

use nalgebra::DVector;

use super::family::Family;
use super::pls::PlsSystem;
use crate::error::{Error, Result};
use crate::sparse::CholeskyFactor;

/// State at the conditional mode.
#[derive(Debug, Clone)]
pub struct PirlsState {
    pub beta: Vec<f64>,
    pub s: Vec<f64>,
    pub eta: Vec<f64>,
    /// `-2 Σ log f(y | η)`
    pub dev: f64,
    pub sqr_s: f64,
    /// `log det(L L')` with weights at the mode.
    pub ld_l2: f64,
    pub factor: CholeskyFactor<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl PirlsState {
    /// Laplace approximation to −2 × marginal log-likelihood.
    pub fn laplace(&self) -> f64 {
        self.dev + self.sqr_s + self.ld_l2
    }
}

const STEP_TOL: f64 = 1e-10;

fn penalized(family: Family, y: &[f64], eta: &[f64], s: &[f64]) -> f64 {
    family.deviance_sum(y, eta) + s.iter().map(|v| v * v).sum::<f64>()
}

fn weights(family: Family, eta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mu: Vec<f64> = eta.iter().map(|&e| family.linkinv(e)).collect();
    let w = mu.iter().map(|&m| family.variance(m)).collect();
    (mu, w)
}

fn max_scaled_change(a: &[f64], b: &[f64]) -> f64 {
    let scale = 1.0 + b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Conditional modes `s` for fixed θ (through `zl`) and fixed β.
pub fn pirls_random(
    sys: &PlsSystem,
    family: Family,
    y: &[f64],
    zl: &[f64],
    beta: &[f64],
    s0: &[f64],
    max_iter: usize,
) -> Result<PirlsState> {
    let xb: Vec<f64> = (&sys.design().x * DVector::from_column_slice(beta)).iter().copied().collect();
    let predictor = |s: &[f64]| -> Vec<f64> {
        sys.zl_mul(zl, s).iter().zip(&xb).map(|(a, b)| a + b).collect()
    };
    let mut s = s0.to_vec();
    let mut eta = predictor(&s);
    let mut obj = penalized(family, y, &eta, &s);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let (mu, w) = weights(family, &eta);
        let target: Vec<f64> = (0..y.len()).map(|i| w[i] * (eta[i] - xb[i]) + (y[i] - mu[i])).collect();
        // a degenerate weighted system ends the iteration unconverged
        let Ok(factor) = sys.factor(zl, Some(&w)) else { break };
        let s_new = factor.solve(&sys.zl_tr_mul(zl, &target));
        let change = max_scaled_change(&s_new, &s);
        let (s_acc, eta_acc, obj_acc) = halve(&s, &s_new, obj, |cand| {
            let e = predictor(cand);
            let o = penalized(family, y, &e, cand);
            (e, o)
        });
        s = s_acc;
        eta = eta_acc;
        obj = obj_acc;
        if change < STEP_TOL {
            converged = true;
            break;
        }
    }
    finish(sys, family, y, zl, beta.to_vec(), s, eta, iterations, converged)
}

/// Joint update of β and `s` for fixed θ. With no random effects this is
/// ordinary IRLS for the GLM.
pub fn pirls_joint(
    sys: &PlsSystem,
    family: Family,
    y: &[f64],
    zl: &[f64],
    beta0: &[f64],
    s0: &[f64],
    max_iter: usize,
) -> Result<PirlsState> {
    let p = beta0.len();
    let pack = |b: &[f64], s: &[f64]| -> Vec<f64> { b.iter().chain(s).copied().collect() };
    let mut cur = pack(beta0, s0);
    let mut eta = sys.linear_predictor(zl, &cur[..p], &cur[p..]);
    let mut obj = penalized(family, y, &eta, &cur[p..]);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let (mu, w) = weights(family, &eta);
        let wy: Vec<f64> = (0..y.len()).map(|i| w[i] * eta[i] + (y[i] - mu[i])).collect();
        let Ok((b_new, s_new, _, _)) = sys.solve_weighted(zl, Some(&w), &wy) else { break };
        let next = pack(&b_new, &s_new);
        let change = max_scaled_change(&next, &cur);
        let (acc, eta_acc, obj_acc) = halve(&cur, &next, obj, |cand| {
            let e = sys.linear_predictor(zl, &cand[..p], &cand[p..]);
            let o = penalized(family, y, &e, &cand[p..]);
            (e, o)
        });
        cur = acc;
        eta = eta_acc;
        obj = obj_acc;
        if change < STEP_TOL {
            converged = true;
            break;
        }
    }
    let s = cur.split_off(p);
    finish(sys, family, y, zl, cur, s, eta, iterations, converged)
}

/// Step halving from `from` towards `to` until the penalized deviance does
/// not increase.
fn halve<F>(from: &[f64], to: &[f64], obj: f64, mut eval: F) -> (Vec<f64>, Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> (Vec<f64>, f64),
{
    let mut t = 1.0;
    let slack = 1e-12 * (1.0 + obj.abs());
    loop {
        let cand: Vec<f64> = from.iter().zip(to).map(|(a, b)| a + t * (b - a)).collect();
        let (e, o) = eval(&cand);
        if o.is_finite() && o <= obj + slack {
            return (cand, e, o);
        }
        t *= 0.5;
        if t < 1e-10 {
            let (e, o) = eval(from);
            return (from.to_vec(), e, o);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    sys: &PlsSystem,
    family: Family,
    y: &[f64],
    zl: &[f64],
    beta: Vec<f64>,
    s: Vec<f64>,
    eta: Vec<f64>,
    iterations: usize,
    converged: bool,
) -> Result<PirlsState> {
    let (_, w) = weights(family, &eta);
    let factor = sys.factor(zl, Some(&w))?;
    let dev = family.deviance_sum(y, &eta);
    if !dev.is_finite() {
        return Err(Error::Numerical("non-finite conditional deviance".into()));
    }
    let sqr_s = s.iter().map(|v| v * v).sum();
    Ok(PirlsState { ld_l2: factor.log_det(), beta, s, eta, dev, sqr_s, factor, iterations, converged })
}

/// Max-norm of the penalized score `(ZΛ)'(y - μ) - s` at a state.
pub fn penalized_score(sys: &PlsSystem, family: Family, y: &[f64], zl: &[f64], st: &PirlsState) -> f64 {
    let resid: Vec<f64> = y.iter().zip(&st.eta).map(|(yi, e)| yi - family.linkinv(*e)).collect();
    sys.zl_tr_mul(zl, &resid)
        .iter()
        .zip(&st.s)
        .fold(0.0f64, |m, (g, s)| m.max((g - s).abs()))
}
