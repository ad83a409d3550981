//! Penalized least squares for a fixed covariance parameter θ.
//!
//! With `ZΛ` the relative random-effects design, the system solved is
//!
//! ```text
//! L L'        = Λ'Z'WZΛ + I
//! L RZX       = Λ'Z'WX
//! RX RX'      = X'WX - RZX'RZX
//! L cu        = Λ'Z'Wy
//! RX RX' β    = X'Wy - RZX'cu
//! L' s        = cu - RZX β,      u = Λ s
//! ```

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::design::DesignMatrices;
use crate::error::{Error, Result};
use crate::sparse::{CholeskyFactor, CscMatrix, SymbolicCholesky};

/// Source of one stored entry of `ZΛ`.
#[derive(Debug, Clone, Copy)]
struct FillSource {
    block: u32,
    entry: u32,
    comp: u32,
}

/// Precomputed structure of `ZΛ` and of `Λ'Z'WZΛ + I`, independent of θ,
/// the weights and the response.
#[derive(Debug)]
pub struct PlsSystem {
    design: Arc<DesignMatrices>,
    // ZΛ stored by rows
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    fill: Vec<FillSource>,
    // upper triangle of Λ'Z'WZΛ + I
    m_pattern: CscMatrix<f64>,
    m_diag: Vec<usize>,
    // (slot in M, slot a, slot b, row)
    pairs: Vec<(usize, usize, usize, usize)>,
    symbolic: SymbolicCholesky,
}

/// Output of a penalized least-squares solve.
#[derive(Debug, Clone)]
pub struct PlsSolution {
    pub beta: Vec<f64>,
    /// Spherical random effects.
    pub s: Vec<f64>,
    /// Random effects on the original scale, `Λ s`.
    pub u: Vec<f64>,
    /// Linear predictor `Xβ + ZΛs`.
    pub eta: Vec<f64>,
    /// `Σ w (y - η)² + |s|²`
    pub pwrss: f64,
    pub sqr_s: f64,
    /// `log det(L L')`
    pub ld_l2: f64,
    /// `log det(RX RX')`
    pub ld_rx2: f64,
    pub factor: CholeskyFactor<f64>,
    pub rx: Cholesky<f64, Dyn>,
}

impl PlsSystem {
    pub fn new(design: Arc<DesignMatrices>) -> Result<Self> {
        let n = design.n;
        let q = design.q;
        let mut by_row: Vec<Vec<(usize, FillSource)>> = vec![Vec::new(); n];
        for (bi, (b, e)) in design.template.blocks.iter().zip(&design.z_blocks).enumerate() {
            for (k, (&i, &l)) in e.rows.iter().zip(&e.levels).enumerate() {
                for c in 0..b.dim {
                    let col = b.col_offset + l * b.dim + c;
                    by_row[i].push((col, FillSource { block: bi as u32, entry: k as u32, comp: c as u32 }));
                }
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut fill = Vec::new();
        row_ptr.push(0);
        for row in &mut by_row {
            row.sort_by_key(|&(c, _)| c);
            if row.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Design("random-effect columns overlap within a row".into()));
            }
            for &(c, src) in row.iter() {
                cols.push(c);
                fill.push(src);
            }
            row_ptr.push(cols.len());
        }

        let mut trip: Vec<(usize, usize, f64)> = (0..q).map(|j| (j, j, 0.0)).collect();
        for i in 0..n {
            let r = &cols[row_ptr[i]..row_ptr[i + 1]];
            for (a, &ca) in r.iter().enumerate() {
                for &cb in &r[a..] {
                    trip.push((ca, cb, 0.0));
                }
            }
        }
        let m_pattern = CscMatrix::from_triplets(q, q, &trip)?;
        let slot = |r: usize, c: usize| -> usize {
            let start = m_pattern.col_ptr()[c];
            let end = m_pattern.col_ptr()[c + 1];
            start + m_pattern.row_idx()[start..end].binary_search(&r).expect("pattern entry")
        };
        let m_diag = (0..q).map(|j| slot(j, j)).collect();
        let mut pairs = Vec::new();
        for i in 0..n {
            for ka in row_ptr[i]..row_ptr[i + 1] {
                for kb in ka..row_ptr[i + 1] {
                    pairs.push((slot(cols[ka], cols[kb]), ka, kb, i));
                }
            }
        }
        let symbolic = SymbolicCholesky::analyze(&m_pattern)?;
        Ok(PlsSystem { design, row_ptr, cols, fill, m_pattern, m_diag, pairs, symbolic })
    }

    pub fn design(&self) -> &Arc<DesignMatrices> {
        &self.design
    }

    /// Stored values of `ZΛ_θ`, aligned with the row structure.
    pub fn zl_values(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let t = &self.design.template;
        if theta.len() != t.theta_dim {
            return Err(Error::Design(format!(
                "theta has length {}, template expects {}",
                theta.len(),
                t.theta_dim
            )));
        }
        let factors: Vec<Vec<f64>> = t.blocks.iter().map(|b| b.factor(theta)).collect();
        Ok(self
            .fill
            .iter()
            .map(|src| {
                let b = &t.blocks[src.block as usize];
                let d = b.dim;
                let z = &self.design.z_blocks[src.block as usize].values[src.entry as usize * d..][..d];
                let f = &factors[src.block as usize];
                let c = src.comp as usize;
                (c..d).map(|r| z[r] * f[r * d + c]).sum()
            })
            .collect())
    }

    /// `ZΛ v`
    pub fn zl_mul(&self, zl: &[f64], v: &[f64]) -> Vec<f64> {
        (0..self.design.n)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .map(|k| zl[k] * v[self.cols[k]])
                    .sum()
            })
            .collect()
    }

    /// `(ZΛ)' v`
    pub fn zl_tr_mul(&self, zl: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.design.q];
        for i in 0..self.design.n {
            let vi = v[i];
            if vi == 0.0 {
                continue;
            }
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[self.cols[k]] += zl[k] * vi;
            }
        }
        out
    }

    /// `ZΛ` as a sparse matrix.
    pub fn zl_matrix(&self, zl: &[f64]) -> CscMatrix<f64> {
        let mut trip = Vec::with_capacity(zl.len());
        for i in 0..self.design.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                trip.push((i, self.cols[k], zl[k]));
            }
        }
        CscMatrix::from_triplets(self.design.n, self.design.q, &trip).expect("valid pattern")
    }

    /// Upper triangle of `Λ'Z'WZΛ + I`.
    pub fn assemble(&self, zl: &[f64], w: Option<&[f64]>) -> CscMatrix<f64> {
        let mut m = self.m_pattern.clone();
        let vals = m.values_mut();
        for &(slot, a, b, i) in &self.pairs {
            let wi = w.map_or(1.0, |w| w[i]);
            vals[slot] += wi * zl[a] * zl[b];
        }
        for &d in &self.m_diag {
            vals[d] += 1.0;
        }
        m
    }

    pub fn factor(&self, zl: &[f64], w: Option<&[f64]>) -> Result<CholeskyFactor<f64>> {
        self.symbolic.factor(&self.assemble(zl, w))
    }

    /// `u = Λ s`
    pub fn lambda_mul(&self, theta: &[f64], s: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; s.len()];
        for b in &self.design.template.blocks {
            let f = b.factor(theta);
            let d = b.dim;
            for l in 0..b.n_levels {
                let base = b.col_offset + l * d;
                for r in 0..d {
                    u[base + r] = (0..=r).map(|c| f[r * d + c] * s[base + c]).sum();
                }
            }
        }
        u
    }

    /// Solves the weighted system for both β and s. `wy` is the weighted
    /// response `W y` (for working responses this is `Wη + (y - μ)`).
    pub fn solve_weighted(
        &self,
        zl: &[f64],
        w: Option<&[f64]>,
        wy: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, CholeskyFactor<f64>, Cholesky<f64, Dyn>)> {
        let d = &self.design;
        let (n, p, q) = (d.n, d.p, d.q);
        let factor = self.factor(zl, w)?;

        let mut cu = self.zl_tr_mul(zl, wy);
        factor.solve_lower_in_place(&mut cu);

        let x = &d.x;
        let mut rzx = DMatrix::<f64>::zeros(q, p);
        let mut wxcol = vec![0.0; n];
        for j in 0..p {
            for i in 0..n {
                wxcol[i] = w.map_or(1.0, |w| w[i]) * x[(i, j)];
            }
            let mut col = self.zl_tr_mul(zl, &wxcol);
            factor.solve_lower_in_place(&mut col);
            rzx.set_column(j, &DVector::from_vec(col));
        }
        let xtwx = match w {
            None => x.tr_mul(x),
            Some(w) => {
                let wx = DMatrix::from_fn(n, p, |i, j| w[i] * x[(i, j)]);
                x.tr_mul(&wx)
            }
        };
        let xtwy = x.tr_mul(&DVector::from_column_slice(wy));
        let cu_v = DVector::from_column_slice(&cu);
        let scale: Vec<f64> = xtwx.diagonal().iter().copied().collect();
        let rxtrx = xtwx - rzx.tr_mul(&rzx);
        let deficient = || {
            if w.is_none() {
                Error::Design("fixed-effects design is rank deficient".into())
            } else {
                Error::Numerical("weighted fixed-effects cross-product is not positive definite".into())
            }
        };
        let rx = Cholesky::new(rxtrx).ok_or_else(deficient)?;
        // pivots that collapse relative to the column scale signal collinearity
        if rx.l().diagonal().iter().zip(&scale).any(|(l, s)| l * l <= 1e-10 * s) {
            return Err(deficient());
        }
        let beta = rx.solve(&(xtwy - rzx.tr_mul(&cu_v)));
        let mut s: Vec<f64> = (cu_v - &rzx * &beta).iter().copied().collect();
        factor.solve_upper_in_place(&mut s);
        Ok((beta.iter().copied().collect(), s, factor, rx))
    }

    /// Solve for response `y` with optional observation weights.
    pub fn solve(&self, theta: &[f64], y: &[f64], w: Option<&[f64]>) -> Result<PlsSolution> {
        let zl = self.zl_values(theta)?;
        let wy: Vec<f64> = match w {
            Some(w) => y.iter().zip(w).map(|(a, b)| a * b).collect(),
            None => y.to_vec(),
        };
        let (beta, s, factor, rx) = self.solve_weighted(&zl, w, &wy)?;
        let eta = self.linear_predictor(&zl, &beta, &s);
        let rss: f64 = (0..y.len())
            .map(|i| w.map_or(1.0, |w| w[i]) * (y[i] - eta[i]).powi(2))
            .sum();
        let sqr_s: f64 = s.iter().map(|v| v * v).sum();
        let ld_l2 = factor.log_det();
        let ld_rx2 = 2.0 * rx.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let u = self.lambda_mul(theta, &s);
        Ok(PlsSolution { beta, s, u, eta, pwrss: rss + sqr_s, sqr_s, ld_l2, ld_rx2, factor, rx })
    }

    pub fn linear_predictor(&self, zl: &[f64], beta: &[f64], s: &[f64]) -> Vec<f64> {
        let xb = &self.design.x * DVector::from_column_slice(beta);
        let zs = self.zl_mul(zl, s);
        xb.iter().zip(zs).map(|(a, b)| a + b).collect()
    }
}

/// −2 × profiled (restricted) log-likelihood for a Gaussian model.
pub fn profiled_from_solution(sol: &PlsSolution, n: usize, p: usize, reml: bool) -> f64 {
    let dof = if reml { (n - p) as f64 } else { n as f64 };
    let mut v = sol.ld_l2 + dof * (1.0 + (2.0 * std::f64::consts::PI * sol.pwrss / dof).ln());
    if reml {
        v += sol.ld_rx2;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, Dataset};
    use crate::design::build_design;
    use crate::formula::parse_formula;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sim(seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 30;
        let g: Vec<String> = (0..n).map(|i| format!("g{}", i % 5)).collect();
        let h: Vec<String> = (0..n).map(|i| format!("h{}", (i * 7) % 4)).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 + 2.0 * v + rng.gen_range(-1.0..1.0)).collect();
        Dataset::new()
            .with_column("y", Column::numeric(y))
            .unwrap()
            .with_column("x", Column::numeric(x))
            .unwrap()
            .with_column("g", Column::categorical(&g))
            .unwrap()
            .with_column("h", Column::categorical(&h))
            .unwrap()
    }

    /// Dense solve of the augmented normal equations in (β, s).
    fn brute_force(d: &DesignMatrices, theta: &[f64]) -> (DVector<f64>, f64) {
        let lam = crate::design::lambda_factor(&d.template, theta).unwrap().to_dense();
        let z = d.z.to_dense();
        let (n, p, q) = (d.n, d.p, d.q);
        let zl = DMatrix::from_fn(n, q, |i, j| (0..q).map(|k| z[i][k] * lam[k][j]).sum());
        let mut a = DMatrix::<f64>::zeros(n + q, p + q);
        a.view_mut((0, 0), (n, p)).copy_from(&d.x);
        a.view_mut((0, p), (n, q)).copy_from(&zl);
        a.view_mut((n, p), (q, q)).fill_with_identity();
        let mut b = DVector::<f64>::zeros(n + q);
        b.rows_mut(0, n).copy_from_slice(&d.y);
        let sol = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
        let r = &a * &sol - &b;
        (sol, r.norm_squared())
    }

    #[test]
    fn matches_dense_augmented_solve() {
        for seed in 0..5 {
            let ds = sim(seed);
            let d = Arc::new(build_design(&parse_formula("y ~ x + (x | g) + (1 | h)").unwrap(), &ds).unwrap());
            let sys = PlsSystem::new(d.clone()).unwrap();
            let theta = [0.8, -0.3, 0.5, 1.7];
            let sol = sys.solve(&theta, &d.y, None).unwrap();
            let (bf, pwrss) = brute_force(&d, &theta);
            for j in 0..d.p {
                assert!((sol.beta[j] - bf[j]).abs() < 1e-8);
            }
            for j in 0..d.q {
                assert!((sol.s[j] - bf[d.p + j]).abs() < 1e-8);
            }
            assert!((sol.pwrss - pwrss).abs() < 1e-8 * pwrss);
        }
    }

    #[test]
    fn cholesky_reproduces_system_matrix() {
        let ds = sim(7);
        let d = Arc::new(build_design(&parse_formula("y ~ x + (x | g) + (1 | h)").unwrap(), &ds).unwrap());
        let sys = PlsSystem::new(d.clone()).unwrap();
        let theta = [1.1, 0.4, 0.9, 0.6];
        let zl = sys.zl_values(&theta).unwrap();
        let l = sys.factor(&zl, None).unwrap().to_csc();
        let llt = l.mul(&l.transpose()).unwrap().to_dense();
        let zlm = sys.zl_matrix(&zl).to_dense();
        let q = d.q;
        let mut err = 0.0f64;
        let mut norm = 0.0f64;
        for a in 0..q {
            for b in 0..q {
                let mut m: f64 = (0..d.n).map(|i| zlm[i][a] * zlm[i][b]).sum();
                if a == b {
                    m += 1.0;
                }
                err += (llt[a][b] - m).powi(2);
                norm += m * m;
            }
        }
        assert!((err / norm).sqrt() < 1e-12);
    }

    #[test]
    fn zero_theta_gives_ols() {
        let ds = sim(3);
        let d = Arc::new(build_design(&parse_formula("y ~ x + (1 | g)").unwrap(), &ds).unwrap());
        let sys = PlsSystem::new(d.clone()).unwrap();
        let sol = sys.solve(&[0.0], &d.y, None).unwrap();
        assert!(sol.u.iter().all(|&v| v == 0.0));
        let ols = d.x.clone().svd(true, true).solve(&DVector::from_column_slice(&d.y), 1e-14).unwrap();
        for j in 0..d.p {
            assert!((sol.beta[j] - ols[j]).abs() < 1e-10);
        }
        assert_eq!(sol.ld_l2, 0.0);
    }

    #[test]
    fn no_random_effects() {
        let ds = sim(4);
        let d = Arc::new(build_design(&parse_formula("y ~ x").unwrap(), &ds).unwrap());
        let sys = PlsSystem::new(d.clone()).unwrap();
        let sol = sys.solve(&[], &d.y, None).unwrap();
        assert!(sol.s.is_empty());
        let ols = d.x.clone().svd(true, true).solve(&DVector::from_column_slice(&d.y), 1e-14).unwrap();
        assert!((sol.beta[1] - ols[1]).abs() < 1e-10);
        // ML criterion equals -2 log-likelihood of the OLS fit
        let n = d.n as f64;
        let rss = sol.pwrss;
        let ll = -0.5 * n * (2.0 * std::f64::consts::PI * rss / n).ln() - 0.5 * n;
        assert!((profiled_from_solution(&sol, d.n, d.p, false) + 2.0 * ll).abs() < 1e-10);
    }

    #[test]
    fn rank_deficient_fixed_effects() {
        let ds = sim(5);
        let x2: Vec<f64> = ds.numeric("x").unwrap().iter().map(|v| 2.0 * v).collect();
        let ds = ds.with_column("x2", Column::numeric(x2)).unwrap();
        let d = Arc::new(build_design(&parse_formula("y ~ x + x2 + (1 | g)").unwrap(), &ds).unwrap());
        let sys = PlsSystem::new(d.clone()).unwrap();
        assert!(matches!(sys.solve(&[1.0], &d.y, None), Err(Error::Design(_))));
    }

    #[test]
    fn weighted_solve_matches_row_scaling() {
        let ds = sim(9);
        let d = Arc::new(build_design(&parse_formula("y ~ x + (1 | g)").unwrap(), &ds).unwrap());
        let sys = PlsSystem::new(d.clone()).unwrap();
        let w: Vec<f64> = (0..d.n).map(|i| 0.5 + (i % 3) as f64).collect();
        let sol = sys.solve(&[0.7], &d.y, Some(&w)).unwrap();
        // dense oracle on rows scaled by sqrt(w)
        let lam = 0.7;
        let z = d.z.to_dense();
        let (n, p, q) = (d.n, d.p, d.q);
        let mut a = DMatrix::<f64>::zeros(n + q, p + q);
        let mut b = DVector::<f64>::zeros(n + q);
        for i in 0..n {
            let sw = w[i].sqrt();
            for j in 0..p {
                a[(i, j)] = sw * d.x[(i, j)];
            }
            for j in 0..q {
                a[(i, p + j)] = sw * lam * z[i][j];
            }
            b[i] = sw * d.y[i];
        }
        a.view_mut((n, p), (q, q)).fill_with_identity();
        let bf = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
        for j in 0..p {
            assert!((sol.beta[j] - bf[j]).abs() < 1e-8);
        }
        assert!((sol.pwrss - (&a * &bf - &b).norm_squared()).abs() < 1e-8);
    }
}
