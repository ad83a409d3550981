//! Derivative-free minimization with lower bounds.
//!
//! A Nelder–Mead simplex search in which every trial point is clamped onto
//! the feasible box before evaluation, restarted from the incumbent until a
//! restart no longer improves the objective. A finite-difference Newton
//! polish is available for optima in the interior of the box.

use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct SimplexOptions<T> {
    /// Initial simplex edge, relative to `max(|x_i|, 1)`.
    pub initial_step: T,
    pub ftol_abs: T,
    pub xtol_abs: T,
    pub max_evals: usize,
    /// Number of simplex runs (the first plus restarts from the incumbent).
    pub restarts: usize,
}

impl<T: Scalar> Default for SimplexOptions<T> {
    fn default() -> Self {
        SimplexOptions {
            initial_step: T::lit(0.25),
            ftol_abs: T::lit(1e-8),
            xtol_abs: T::lit(1e-8),
            max_evals: 10_000,
            restarts: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum<T> {
    pub x: Vec<T>,
    pub value: T,
    pub evals: usize,
    pub converged: bool,
}

/// Projects `x` onto `x_i >= lower_i`.
pub fn clamp_to_bounds<T: Scalar>(x: &mut [T], lower: &[T]) {
    for (xi, &lo) in x.iter_mut().zip(lower) {
        if *xi < lo {
            *xi = lo;
        }
    }
}

/// Minimizes `f` subject to `x >= lower` (use `-inf` for free coordinates).
///
/// Non-finite objective values are treated as `+inf`, so the objective may
/// signal infeasibility by returning NaN or infinity.
pub fn minimize_bounded<T, F>(
    mut f: F,
    x0: &[T],
    lower: &[T],
    opts: &SimplexOptions<T>,
) -> Minimum<T>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[T], evals: &mut usize| -> T {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            T::infinity()
        }
    };

    let mut best_x = x0.to_vec();
    clamp_to_bounds(&mut best_x, lower);
    let mut best_f = eval(&best_x, &mut evals);
    if n == 0 {
        return Minimum {
            x: best_x,
            value: best_f,
            evals,
            converged: best_f.is_finite(),
        };
    }

    let mut converged = false;
    for run in 0..opts.restarts.max(1) {
        let step_scale = if run == 0 {
            opts.initial_step
        } else {
            opts.initial_step * T::lit(0.5)
        };
        let budget = opts.max_evals.saturating_sub(evals);
        if budget == 0 {
            break;
        }
        let (x, fx, used, ok) = simplex_run(&mut eval, &best_x, best_f, lower, step_scale, opts, budget);
        evals += used;
        let improved = best_f - fx > opts.ftol_abs;
        if fx <= best_f {
            best_x = x;
            best_f = fx;
        }
        converged = ok;
        if run > 0 && !improved {
            break;
        }
    }

    Minimum {
        x: best_x,
        value: best_f,
        evals,
        converged: converged && best_f.is_finite(),
    }
}

#[allow(clippy::too_many_arguments)]
fn simplex_run<T, F>(
    eval: &mut F,
    start: &[T],
    f_start: T,
    lower: &[T],
    step_scale: T,
    opts: &SimplexOptions<T>,
    budget: usize,
) -> (Vec<T>, T, usize, bool)
where
    T: Scalar,
    F: FnMut(&[T], &mut usize) -> T,
{
    let n = start.len();
    let mut used = 0usize;
    let (alpha, gamma, rho, sigma) = (T::one(), T::lit(2.0), T::lit(0.5), T::lit(0.5));

    let mut pts: Vec<Vec<T>> = Vec::with_capacity(n + 1);
    let mut vals: Vec<T> = Vec::with_capacity(n + 1);
    pts.push(start.to_vec());
    vals.push(f_start);
    for i in 0..n {
        let mut p = start.to_vec();
        let h = step_scale * start[i].abs().max(T::one());
        p[i] += h;
        clamp_to_bounds(&mut p, lower);
        if p[i] == start[i] {
            p[i] -= h;
        }
        let v = eval(&p, &mut used);
        pts.push(p);
        vals.push(v);
    }

    let mut order: Vec<usize> = (0..=n).collect();
    let mut converged = false;
    while used < budget {
        order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap_or(std::cmp::Ordering::Equal));
        let (ib, iw, isw) = (order[0], order[n], order[n - usize::from(n > 0)]);
        let f_spread = vals[iw] - vals[ib];
        let x_spread = pts
            .iter()
            .flat_map(|p| p.iter().zip(&pts[ib]).map(|(a, b)| (*a - *b).abs()))
            .fold(T::zero(), T::max);
        if f_spread.is_finite() && f_spread <= opts.ftol_abs && x_spread <= opts.xtol_abs {
            converged = true;
            break;
        }
        if x_spread <= T::epsilon() * T::lit(16.0) {
            // collapsed simplex; no further progress possible
            converged = f_spread.is_finite();
            break;
        }

        let mut centroid = vec![T::zero(); n];
        for &k in &order[..n] {
            for (c, v) in centroid.iter_mut().zip(&pts[k]) {
                *c += *v;
            }
        }
        let nf = T::from_usize(n).unwrap();
        centroid.iter_mut().for_each(|c| *c /= nf);

        let along = |t: T| -> Vec<T> {
            let mut p: Vec<T> = centroid
                .iter()
                .zip(&pts[iw])
                .map(|(c, w)| *c + t * (*c - *w))
                .collect();
            clamp_to_bounds(&mut p, lower);
            p
        };

        let xr = along(alpha);
        let fr = eval(&xr, &mut used);
        if fr < vals[ib] {
            let xe = along(gamma);
            let fe = eval(&xe, &mut used);
            if fe < fr {
                pts[iw] = xe;
                vals[iw] = fe;
            } else {
                pts[iw] = xr;
                vals[iw] = fr;
            }
            continue;
        }
        if fr < vals[isw] {
            pts[iw] = xr;
            vals[iw] = fr;
            continue;
        }
        let (xc, fc) = if fr < vals[iw] {
            let xc = along(rho * alpha);
            let fc = eval(&xc, &mut used);
            (xc, fc)
        } else {
            let xc = along(-rho);
            let fc = eval(&xc, &mut used);
            (xc, fc)
        };
        if fc < vals[iw].min(fr) {
            pts[iw] = xc;
            vals[iw] = fc;
            continue;
        }
        // shrink towards the best vertex
        let best = pts[ib].clone();
        for k in 0..=n {
            if k == ib {
                continue;
            }
            let mut p: Vec<T> = best
                .iter()
                .zip(&pts[k])
                .map(|(b, v)| *b + sigma * (*v - *b))
                .collect();
            clamp_to_bounds(&mut p, lower);
            vals[k] = eval(&p, &mut used);
            pts[k] = p;
        }
    }
    let ib = (0..=n)
        .min_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap();
    (pts[ib].clone(), vals[ib], used, converged)
}

/// Central-difference gradient and Hessian of `f` at `x` with per-coordinate
/// steps `h`.
pub fn fd_gradient_hessian<T, F>(f: &mut F, x: &[T], fx: T, h: &[T]) -> (Vec<T>, Vec<Vec<T>>)
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    let n = x.len();
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    let mut g = vec![T::zero(); n];
    let mut hess = vec![vec![T::zero(); n]; n];
    let mut p = x.to_vec();
    for i in 0..n {
        p[i] = x[i] + h[i];
        let fp = f(&p);
        p[i] = x[i] - h[i];
        let fm = f(&p);
        p[i] = x[i];
        g[i] = (fp - fm) / (two * h[i]);
        hess[i][i] = (fp - two * fx + fm) / (h[i] * h[i]);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let mut corner = |si: T, sj: T| {
                p[i] = x[i] + si * h[i];
                p[j] = x[j] + sj * h[j];
                let v = f(&p);
                p[i] = x[i];
                p[j] = x[j];
                v
            };
            let v = (corner(T::one(), T::one()) - corner(T::one(), -T::one())
                - corner(-T::one(), T::one())
                + corner(-T::one(), -T::one()))
                / (four * h[i] * h[j]);
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    (g, hess)
}

/// Newton refinement of an interior minimum with finite-difference
/// derivatives. Coordinates within `2 h_i` of their lower bound are held
/// fixed. Only steps that lower `f` are accepted.
pub fn newton_polish<T, F>(mut f: F, start: &Minimum<T>, lower: &[T], iterations: usize) -> Minimum<T>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    let mut x = start.x.clone();
    let mut fx = start.value;
    let mut evals = start.evals;
    let rel = T::lit(1e-5);
    let two = T::lit(2.0);
    for _ in 0..iterations {
        let h: Vec<T> = x.iter().map(|v| rel * v.abs().max(T::one())).collect();
        let free: Vec<usize> = (0..x.len())
            .filter(|&i| !(lower[i].is_finite() && x[i] - lower[i] < two * h[i]))
            .collect();
        if free.is_empty() {
            break;
        }
        let base = x.clone();
        let mut sub = |z: &[T]| {
            let mut full = base.clone();
            for (k, &i) in free.iter().enumerate() {
                full[i] = z[k];
            }
            evals += 1;
            f(&full)
        };
        let z0: Vec<T> = free.iter().map(|&i| x[i]).collect();
        let hz: Vec<T> = free.iter().map(|&i| h[i]).collect();
        let (g, hess) = fd_gradient_hessian(&mut sub, &z0, fx, &hz);
        let Some(step) = solve_spd(&hess, &g) else {
            break;
        };
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..20 {
            let mut z: Vec<T> = z0.iter().zip(&step).map(|(a, s)| *a - t * *s).collect();
            let lz: Vec<T> = free.iter().map(|&i| lower[i]).collect();
            clamp_to_bounds(&mut z, &lz);
            let fz = sub(&z);
            if fz.is_finite() && fz <= fx {
                let moved = z.iter().zip(&z0).map(|(a, b)| (*a - *b).abs()).fold(T::zero(), T::max);
                for (k, &i) in free.iter().enumerate() {
                    x[i] = z[k];
                }
                fx = fz;
                accepted = moved > T::zero();
                if moved < T::lit(1e-12) {
                    accepted = false;
                }
                break;
            }
            t *= T::lit(0.5);
        }
        if !accepted {
            break;
        }
    }
    Minimum {
        x,
        value: fx,
        evals,
        converged: start.converged,
    }
}

/// Chord iteration `x ← x - H⁻¹ ∇f(x)` with a fixed Hessian approximation
/// `hess` (typically taken at the optimum of a nearby problem) and
/// central-difference gradients. Coordinates sitting on their bound with a
/// gradient pointing outward stay fixed. Converges when the largest scaled
/// step falls below `xtol`.
pub fn chord_newton<T, F>(mut f: F, x0: &[T], lower: &[T], hess: &[Vec<T>], max_iter: usize, xtol: T) -> Minimum<T>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    let n = x0.len();
    let rel = T::lit(1e-5);
    let two = T::lit(2.0);
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut evals = 1;
    let mut converged = false;
    for _ in 0..max_iter {
        if !fx.is_finite() {
            break;
        }
        let h: Vec<T> = x.iter().map(|v| rel * v.abs().max(T::one())).collect();
        let mut g = vec![T::zero(); n];
        let mut p = x.clone();
        for i in 0..n {
            let at_bound = lower[i].is_finite() && x[i] - lower[i] < h[i];
            p[i] = x[i] + h[i];
            let fp = f(&p);
            let fm = if at_bound {
                p[i] = x[i];
                fx
            } else {
                p[i] = x[i] - h[i];
                f(&p)
            };
            evals += 2;
            p[i] = x[i];
            g[i] = if at_bound { (fp - fm) / h[i] } else { (fp - fm) / (two * h[i]) };
        }
        let free: Vec<usize> = (0..n)
            .filter(|&i| !(lower[i].is_finite() && x[i] - lower[i] < h[i] && g[i] >= T::zero()))
            .collect();
        if free.is_empty() {
            converged = true;
            break;
        }
        let sub_h: Vec<Vec<T>> = free.iter().map(|&a| free.iter().map(|&b| hess[a][b]).collect()).collect();
        let sub_g: Vec<T> = free.iter().map(|&i| g[i]).collect();
        let Some(step) = solve_spd(&sub_h, &sub_g) else {
            break;
        };
        let mut t = T::one();
        let mut moved = T::zero();
        let mut accepted = false;
        for _ in 0..12 {
            let mut z = x.clone();
            for (k, &i) in free.iter().enumerate() {
                z[i] = x[i] - t * step[k];
            }
            clamp_to_bounds(&mut z, lower);
            let fz = f(&z);
            evals += 1;
            if fz.is_finite() && fz <= fx {
                moved = (0..n)
                    .map(|i| (z[i] - x[i]).abs() / x[i].abs().max(T::one()))
                    .fold(T::zero(), T::max);
                x = z;
                fx = fz;
                accepted = true;
                break;
            }
            t *= T::lit(0.5);
        }
        if !accepted {
            // no descent along the chord direction: at the optimum to within
            // gradient noise, or the Hessian approximation is poor
            let step_size = step.iter().zip(&free).map(|(s, &i)| s.abs() / x[i].abs().max(T::one())).fold(T::zero(), T::max);
            converged = step_size < xtol.sqrt();
            break;
        }
        if moved < xtol {
            converged = true;
            break;
        }
    }
    Minimum { x, value: fx, evals, converged }
}

/// Solves `A x = b` for symmetric positive definite `A` by dense Cholesky;
/// `None` if `A` is not positive definite.
pub fn solve_spd<T: Scalar>(a: &[Vec<T>], b: &[T]) -> Option<Vec<T>> {
    let n = b.len();
    let mut l = vec![vec![T::zero(); n]; n];
    for j in 0..n {
        let mut d = a[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if !(d > T::zero()) {
            return None;
        }
        l[j][j] = d.sqrt();
        for i in (j + 1)..n {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / l[j][j];
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            let t = l[i][k] * y[k];
            y[i] -= t;
        }
        y[i] /= l[i][i];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let t = l[k][i] * y[k];
            y[i] -= t;
        }
        y[i] /= l[i][i];
    }
    Some(y)
}
