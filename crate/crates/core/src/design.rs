//! Fixed- and random-effect design matrices and the relative covariance
//! factor template.

use nalgebra::DMatrix;

use crate::data::{Column, Dataset};
use crate::error::{Error, Result};
use crate::formula::{ModelFormula, INTERCEPT};
use crate::scalar::Scalar;
use crate::sparse::CscMatrix;

/// Where a block of random effects comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockSource {
    /// Index into `ModelFormula::randoms`.
    Random(usize),
    /// Index into `ModelFormula::smooths`.
    Smooth(usize),
}

/// One block-diagonal piece of Λ: `n_levels` copies of a `dim × dim`
/// lower-triangular factor sharing the same θ entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaBlock {
    pub source: BlockSource,
    pub name: String,
    pub component_names: Vec<String>,
    pub n_levels: usize,
    pub dim: usize,
    pub theta_offset: usize,
    pub col_offset: usize,
}

impl LambdaBlock {
    pub fn theta_len(&self) -> usize {
        self.dim * (self.dim + 1) / 2
    }

    /// θ index of entry `(r, c)`, `r >= c`, in column-major lower-triangle
    /// order.
    pub fn theta_index(&self, r: usize, c: usize) -> usize {
        debug_assert!(r >= c && r < self.dim);
        let before: usize = (0..c).map(|k| self.dim - k).sum();
        self.theta_offset + before + (r - c)
    }

    pub fn n_cols(&self) -> usize {
        self.n_levels * self.dim
    }

    /// Dense per-level factor (row-major `dim × dim`).
    pub fn factor<T: Scalar>(&self, theta: &[T]) -> Vec<T> {
        let d = self.dim;
        let mut out = vec![T::zero(); d * d];
        for c in 0..d {
            for r in c..d {
                out[r * d + c] = theta[self.theta_index(r, c)];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaTemplate {
    pub blocks: Vec<LambdaBlock>,
    pub theta_dim: usize,
    pub q: usize,
}

impl LambdaTemplate {
    pub fn new(specs: Vec<(BlockSource, String, Vec<String>, usize)>) -> Self {
        let mut blocks = Vec::with_capacity(specs.len());
        let (mut t, mut c) = (0, 0);
        for (source, name, component_names, n_levels) in specs {
            let dim = component_names.len();
            let b = LambdaBlock { source, name, component_names, n_levels, dim, theta_offset: t, col_offset: c };
            t += b.theta_len();
            c += b.n_cols();
            blocks.push(b);
        }
        LambdaTemplate { blocks, theta_dim: t, q: c }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.theta_dim {
            return Err(Error::Design(format!(
                "theta has length {len}, template expects {}",
                self.theta_dim
            )));
        }
        Ok(())
    }

    /// Box constraints: diagonal entries non-negative, off-diagonals free.
    pub fn lower_bounds<T: Scalar>(&self) -> Vec<T> {
        let mut lb = vec![T::neg_infinity(); self.theta_dim];
        for i in self.diagonal_indices() {
            lb[i] = T::zero();
        }
        lb
    }

    pub fn diagonal_indices(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .flat_map(|b| (0..b.dim).map(move |c| b.theta_index(c, c)))
            .collect()
    }

    pub fn is_diagonal_index(&self, j: usize) -> bool {
        self.locate(j).map(|(_, r, c)| r == c).unwrap_or(false)
    }

    /// Block index and `(row, col)` position of θ_j.
    pub fn locate(&self, j: usize) -> Option<(usize, usize, usize)> {
        for (bi, b) in self.blocks.iter().enumerate() {
            if j >= b.theta_offset && j < b.theta_offset + b.theta_len() {
                for c in 0..b.dim {
                    for r in c..b.dim {
                        if b.theta_index(r, c) == j {
                            return Some((bi, r, c));
                        }
                    }
                }
            }
        }
        None
    }

    /// Starting value: identity factors.
    pub fn initial_theta<T: Scalar>(&self) -> Vec<T> {
        let mut th = vec![T::zero(); self.theta_dim];
        for i in self.diagonal_indices() {
            th[i] = T::one();
        }
        th
    }

    pub fn theta_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.theta_dim];
        for b in &self.blocks {
            for c in 0..b.dim {
                for r in c..b.dim {
                    names[b.theta_index(r, c)] = if r == c {
                        format!("{}.{}", b.name, b.component_names[r])
                    } else {
                        format!("{}.{}.{}", b.name, b.component_names[r], b.component_names[c])
                    };
                }
            }
        }
        names
    }
}

/// Assembles the block-diagonal, lower-triangular Λ_θ.
pub fn lambda_factor<T: Scalar>(t: &LambdaTemplate, theta: &[T]) -> Result<CscMatrix<T>> {
    t.check_len(theta.len())?;
    let mut trip = Vec::new();
    for b in &t.blocks {
        let f = b.factor(theta);
        for l in 0..b.n_levels {
            let base = b.col_offset + l * b.dim;
            for c in 0..b.dim {
                for r in c..b.dim {
                    trip.push((base + r, base + c, f[r * b.dim + c]));
                }
            }
        }
    }
    CscMatrix::from_triplets(t.q, t.q, &trip)
}

/// 0/1 pattern of the positions θ_j occupies in the per-level blocks,
/// symmetrized and repeated over levels.
pub fn dtheta_pattern<T: Scalar>(t: &LambdaTemplate, j: usize) -> Result<CscMatrix<T>> {
    let (bi, r, c) = t
        .locate(j)
        .ok_or_else(|| Error::Design(format!("theta index {j} out of range 0..{}", t.theta_dim)))?;
    let b = &t.blocks[bi];
    let mut trip = Vec::with_capacity(2 * b.n_levels);
    for l in 0..b.n_levels {
        let base = b.col_offset + l * b.dim;
        trip.push((base + r, base + c, T::one()));
        if r != c {
            trip.push((base + c, base + r, T::one()));
        }
    }
    CscMatrix::from_triplets(t.q, t.q, &trip)
}

/// Nonzero structure of one block of Z: entry `e` places
/// `values[e*dim .. (e+1)*dim]` at row `rows[e]` in the columns of level
/// `levels[e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockEntries {
    pub rows: Vec<usize>,
    pub levels: Vec<usize>,
    pub values: Vec<f64>,
}

/// Truncated polynomial spline basis for a single covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothBasis<T> {
    /// Columns `1, x, ..., x^g`.
    pub fixed_columns: Vec<Vec<T>>,
    /// Columns `(x - κ_j)_+^g`.
    pub random_columns: Vec<Vec<T>>,
    pub knots: Vec<T>,
}

/// Knots sit at the quantiles `j / (k + 1)` of the distinct covariate
/// values (linear interpolation between order statistics).
pub fn truncated_poly_basis<T: Scalar>(x: &[T], g: usize, k: usize) -> Result<SmoothBasis<T>> {
    if g < 1 || k < 2 {
        return Err(Error::Design(format!("smooth needs g >= 1 and k >= 2 (got g={g}, k={k})")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Design("smooth covariate has non-finite values".into()));
    }
    let mut u: Vec<T> = x.to_vec();
    u.sort_by(|a, b| a.partial_cmp(b).unwrap());
    u.dedup();
    if u.len() < k + 2 {
        return Err(Error::Design(format!(
            "{} distinct covariate values are too few for {k} knots",
            u.len()
        )));
    }
    let m = u.len();
    let knots: Vec<T> = (1..=k)
        .map(|j| {
            let h = (m - 1) as f64 * j as f64 / (k + 1) as f64;
            let lo = h.floor() as usize;
            let frac = T::lit(h - lo as f64);
            if lo + 1 < m {
                u[lo] + frac * (u[lo + 1] - u[lo])
            } else {
                u[lo]
            }
        })
        .collect();
    let fixed_columns = (0..=g)
        .map(|e| x.iter().map(|&v| v.powi(e as i32)).collect())
        .collect();
    let random_columns = knots
        .iter()
        .map(|&kap| {
            x.iter()
                .map(|&v| if v > kap { (v - kap).powi(g as i32) } else { T::zero() })
                .collect()
        })
        .collect();
    Ok(SmoothBasis { fixed_columns, random_columns, knots })
}

/// Grouping factor summary for display.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupInfo {
    pub name: String,
    pub n_levels: usize,
}

#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub y: Vec<f64>,
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub z: CscMatrix<f64>,
    pub template: LambdaTemplate,
    /// One entry list per template block.
    pub z_blocks: Vec<BlockEntries>,
    pub groups: Vec<GroupInfo>,
}

impl DesignMatrices {
    pub fn theta_dim(&self) -> usize {
        self.template.theta_dim
    }

    /// `(block, level, component)` for Z column `j`.
    pub fn column_info(&self, j: usize) -> Option<(usize, usize, usize)> {
        self.template.blocks.iter().enumerate().find_map(|(bi, b)| {
            (j >= b.col_offset && j < b.col_offset + b.n_cols())
                .then(|| (bi, (j - b.col_offset) / b.dim, (j - b.col_offset) % b.dim))
        })
    }

    /// Same design with a different response vector.
    pub fn with_response(&self, y: Vec<f64>) -> Result<DesignMatrices> {
        if y.len() != self.n {
            return Err(Error::Data(format!("response has length {}, expected {}", y.len(), self.n)));
        }
        let mut d = self.clone();
        d.y = y;
        Ok(d)
    }
}

fn numeric_column<'a>(d: &'a Dataset, name: &str, role: &str) -> Result<&'a [f64]> {
    match d.column(name) {
        Ok(Column::Numeric { values, .. }) => Ok(values),
        Ok(Column::Categorical { .. }) => Err(Error::Design(format!("{role} `{name}` must be numeric"))),
        Err(_) => Err(Error::Design(format!("variable `{name}` not found in data"))),
    }
}

pub fn build_design(f: &ModelFormula, d: &Dataset) -> Result<DesignMatrices> {
    for v in f.variables() {
        if !d.has_column(v) {
            return Err(Error::Design(format!("variable `{v}` not found in data")));
        }
    }
    let n = d.n_rows();
    let y = numeric_column(d, &f.response, "response")?.to_vec();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Design("response contains non-finite values".into()));
    }
    for s in &f.smooths {
        if f.fixed.contains(&s.variable) {
            return Err(Error::Design(format!(
                "`{}` enters both linearly and as a smooth",
                s.variable
            )));
        }
    }

    // fixed effects
    let mut xcols: Vec<Vec<f64>> = Vec::new();
    let mut x_names: Vec<String> = Vec::new();
    let mut has_constant = f.intercept;
    if f.intercept {
        xcols.push(vec![1.0; n]);
        x_names.push(INTERCEPT.to_string());
    }
    for v in &f.fixed {
        match d.column(v)? {
            Column::Numeric { values, .. } => {
                xcols.push(values.clone());
                x_names.push(v.clone());
            }
            Column::Categorical { codes, levels } => {
                let first = if has_constant { 1 } else { 0 };
                for (li, lev) in levels.iter().enumerate().skip(first) {
                    xcols.push(codes.iter().map(|&c| if c == li { 1.0 } else { 0.0 }).collect());
                    x_names.push(format!("{v}{lev}"));
                }
                has_constant = true;
            }
        }
    }

    // random-effect blocks, formula order then smooths
    let mut specs = Vec::new();
    let mut entries = Vec::new();
    let mut groups = Vec::new();
    for (ti, r) in f.randoms.iter().enumerate() {
        let fac = d.factor(&r.group)?;
        if fac.n_levels() < 2 {
            return Err(Error::Design(format!("grouping factor `{}` has fewer than 2 levels", r.group)));
        }
        let slopes: Vec<&[f64]> = r
            .slopes
            .iter()
            .map(|s| numeric_column(d, s, "random slope"))
            .collect::<Result<_>>()?;
        let dim = r.dim();
        let mut values = Vec::with_capacity(n * dim);
        for i in 0..n {
            if r.has_intercept {
                values.push(1.0);
            }
            values.extend(slopes.iter().map(|s| s[i]));
        }
        entries.push(BlockEntries { rows: (0..n).collect(), levels: fac.codes.clone(), values });
        if !groups.iter().any(|g: &GroupInfo| g.name == r.group) {
            groups.push(GroupInfo { name: r.group.clone(), n_levels: fac.n_levels() });
        }
        specs.push((BlockSource::Random(ti), r.group.clone(), r.component_names(), fac.n_levels()));
    }
    for (si, s) in f.smooths.iter().enumerate() {
        let xv = numeric_column(d, &s.variable, "smooth covariate")?;
        let basis = truncated_poly_basis(xv, s.degree, s.knots)?;
        let skip = if has_constant { 1 } else { 0 };
        for (e, col) in basis.fixed_columns.into_iter().enumerate().skip(skip) {
            x_names.push(if e == 0 { INTERCEPT.to_string() } else { format!("s({})^{e}", s.variable) });
            xcols.push(col);
        }
        has_constant = true;
        let mut be = BlockEntries { rows: Vec::new(), levels: Vec::new(), values: Vec::new() };
        for i in 0..n {
            for (j, col) in basis.random_columns.iter().enumerate() {
                if col[i] != 0.0 {
                    be.rows.push(i);
                    be.levels.push(j);
                    be.values.push(col[i]);
                }
            }
        }
        entries.push(be);
        specs.push((
            BlockSource::Smooth(si),
            format!("s({})", s.variable),
            vec![INTERCEPT.to_string()],
            s.knots,
        ));
    }
    let template = LambdaTemplate::new(specs);
    let p = xcols.len();
    let x = DMatrix::from_fn(n, p, |i, j| xcols[j][i]);

    let mut trip = Vec::new();
    for (b, e) in template.blocks.iter().zip(&entries) {
        for (k, (&i, &l)) in e.rows.iter().zip(&e.levels).enumerate() {
            for c in 0..b.dim {
                trip.push((i, b.col_offset + l * b.dim + c, e.values[k * b.dim + c]));
            }
        }
    }
    let z = CscMatrix::from_triplets(n, template.q, &trip)?;
    Ok(DesignMatrices {
        n,
        p,
        q: template.q,
        y,
        x,
        x_names,
        z,
        template,
        z_blocks: entries,
        groups,
    })
}
