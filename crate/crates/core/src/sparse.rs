//! Compressed sparse column matrices and an up-looking sparse Cholesky.
//!
//! The factorization splits into a symbolic phase (elimination tree and
//! column pattern of `L`) that depends only on the nonzero structure, and a
//! numeric phase that can be repeated for every new set of values with the
//! same structure. Mixed-model fitting evaluates hundreds of factorizations
//! of `Λ'Z'WZΛ + I` with a fixed pattern, so the split matters.
//!
//! No fill-reducing permutation is applied.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Column-compressed sparse matrix. Row indices within a column are sorted
/// and unique.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix<T> {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> CscMatrix<T> {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        CscMatrix {
            nrows,
            ncols,
            col_ptr: vec![0; ncols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        CscMatrix {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![T::one(); n],
        }
    }

    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are
    /// summed; explicit zeros are kept as structural entries.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, T)],
    ) -> Result<Self> {
        let mut counts = vec![0usize; ncols + 1];
        for &(r, c, _) in triplets {
            if r >= nrows || c >= ncols {
                return Err(Error::Design(format!(
                    "triplet ({r}, {c}) outside {nrows}x{ncols} matrix"
                )));
            }
            counts[c + 1] += 1;
        }
        for c in 0..ncols {
            counts[c + 1] += counts[c];
        }
        let mut next = counts.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![T::zero(); triplets.len()];
        for &(r, c, v) in triplets {
            let slot = next[c];
            rows[slot] = r;
            vals[slot] = v;
            next[c] += 1;
        }
        // sort each column and merge duplicates
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        col_ptr.push(0);
        let mut scratch: Vec<(usize, T)> = Vec::new();
        for c in 0..ncols {
            scratch.clear();
            scratch.extend((counts[c]..counts[c + 1]).map(|k| (rows[k], vals[k])));
            scratch.sort_by_key(|&(r, _)| r);
            let mut last: Option<usize> = None;
            for &(r, v) in &scratch {
                if last == Some(r) {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                    last = Some(r);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Ok(CscMatrix {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// Iterates the `(row, value)` pairs of column `j`.
    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let range = self.col_ptr[j]..self.col_ptr[j + 1];
        self.row_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// Value at `(i, j)`, zero if not stored.
    pub fn get(&self, i: usize, j: usize) -> T {
        let range = self.col_ptr[j]..self.col_ptr[j + 1];
        match self.row_idx[range.clone()].binary_search(&i) {
            Ok(k) => self.values[range.start + k],
            Err(_) => T::zero(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.nrows + 1];
        for &r in &self.row_idx {
            counts[r + 1] += 1;
        }
        for r in 0..self.nrows {
            counts[r + 1] += counts[r];
        }
        let mut next = counts.clone();
        let mut row_idx = vec![0usize; self.nnz()];
        let mut values = vec![T::zero(); self.nnz()];
        for j in 0..self.ncols {
            for (i, v) in self.column(j) {
                let slot = next[i];
                row_idx[slot] = j;
                values[slot] = v;
                next[i] += 1;
            }
        }
        CscMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            col_ptr: counts,
            row_idx,
            values,
        }
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![T::zero(); self.nrows];
        for (j, &xj) in x.iter().enumerate() {
            if xj == T::zero() {
                continue;
            }
            for (i, v) in self.column(j) {
                y[i] += v * xj;
            }
        }
        y
    }

    /// `y = A' x`
    pub fn tr_mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.nrows);
        (0..self.ncols)
            .map(|j| self.column(j).map(|(i, v)| v * x[i]).sum())
            .collect()
    }

    /// Sparse product `A B`.
    pub fn mul(&self, other: &CscMatrix<T>) -> Result<CscMatrix<T>> {
        if self.ncols != other.nrows {
            return Err(Error::Design(format!(
                "dimension mismatch {}x{} * {}x{}",
                self.nrows, self.ncols, other.nrows, other.ncols
            )));
        }
        let mut trip = Vec::new();
        let mut acc = vec![T::zero(); self.nrows];
        let mut mark = vec![usize::MAX; self.nrows];
        let mut touched = Vec::new();
        for j in 0..other.ncols {
            touched.clear();
            for (k, b) in other.column(j) {
                for (i, a) in self.column(k) {
                    if mark[i] != j {
                        mark[i] = j;
                        acc[i] = T::zero();
                        touched.push(i);
                    }
                    acc[i] += a * b;
                }
            }
            for &i in &touched {
                trip.push((i, j, acc[i]));
            }
        }
        CscMatrix::from_triplets(self.nrows, other.ncols, &trip)
    }

    /// Column-major dense copy.
    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let mut out = vec![vec![T::zero(); self.ncols]; self.nrows];
        for j in 0..self.ncols {
            for (i, v) in self.column(j) {
                out[i][j] = v;
            }
        }
        out
    }

    /// True when every stored entry lies on or below the diagonal.
    pub fn is_lower_triangular(&self) -> bool {
        (0..self.ncols).all(|j| self.column(j).all(|(i, _)| i >= j))
    }
}

/// Structure of a Cholesky factor for a fixed symmetric sparsity pattern.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    parent: Vec<Option<usize>>,
    l_col_ptr: Vec<usize>,
}

impl SymbolicCholesky {
    /// Analyzes the pattern of the upper triangle (`row <= col`) of a
    /// symmetric matrix. Entries below the diagonal are ignored.
    pub fn analyze<T: Scalar>(a: &CscMatrix<T>) -> Result<Self> {
        if a.nrows != a.ncols {
            return Err(Error::Design("Cholesky of a non-square matrix".into()));
        }
        let n = a.ncols;
        let parent = elimination_tree(a);
        let mut counts = vec![1usize; n];
        let mut stack = vec![0usize; n];
        let mut work = vec![usize::MAX; n];
        for k in 0..n {
            let top = ereach(a, k, &parent, &mut stack, &mut work);
            for &i in &stack[top..n] {
                counts[i] += 1;
            }
        }
        let mut l_col_ptr = Vec::with_capacity(n + 1);
        l_col_ptr.push(0);
        for c in counts {
            let last = *l_col_ptr.last().unwrap();
            l_col_ptr.push(last + c);
        }
        Ok(SymbolicCholesky {
            n,
            parent,
            l_col_ptr,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored entries of `L`, diagonal included.
    pub fn factor_nnz(&self) -> usize {
        self.l_col_ptr[self.n]
    }

    /// Numeric factorization `A = L L'` reusing this structure.
    pub fn factor<T: Scalar>(&self, a: &CscMatrix<T>) -> Result<CholeskyFactor<T>> {
        let n = self.n;
        if a.nrows != n || a.ncols != n {
            return Err(Error::Design("matrix does not match symbolic analysis".into()));
        }
        let lp = self.l_col_ptr.clone();
        let nnz = lp[n];
        let mut li = vec![0usize; nnz];
        let mut lx = vec![T::zero(); nnz];
        let mut next = lp[..n].to_vec();
        let mut x = vec![T::zero(); n];
        let mut stack = vec![0usize; n];
        let mut work = vec![usize::MAX; n];
        for k in 0..n {
            let top = ereach(a, k, &self.parent, &mut stack, &mut work);
            for (i, v) in a.column(k) {
                if i <= k {
                    x[i] += v;
                }
            }
            let mut d = x[k];
            x[k] = T::zero();
            for &i in &stack[top..n] {
                let lki = x[i] / lx[lp[i]];
                x[i] = T::zero();
                for p in (lp[i] + 1)..next[i] {
                    x[li[p]] -= lx[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                li[p] = k;
                lx[p] = lki;
            }
            if !(d > T::zero()) {
                return Err(Error::NotPositiveDefinite { pivot: k });
            }
            let p = next[k];
            next[k] += 1;
            li[p] = k;
            lx[p] = d.sqrt();
        }
        Ok(CholeskyFactor {
            n,
            col_ptr: lp,
            row_idx: li,
            values: lx,
        })
    }
}

/// Elimination tree of the upper triangle of `a`.
fn elimination_tree<T: Scalar>(a: &CscMatrix<T>) -> Vec<Option<usize>> {
    let n = a.ncols;
    let mut parent = vec![None; n];
    let mut ancestor: Vec<Option<usize>> = vec![None; n];
    for k in 0..n {
        for (i0, _) in a.column(k) {
            let mut i = i0;
            while i < k {
                let next = ancestor[i];
                ancestor[i] = Some(k);
                match next {
                    None => {
                        parent[i] = Some(k);
                        break;
                    }
                    Some(nx) if nx == k => break,
                    Some(nx) => i = nx,
                }
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of `L` (off-diagonal), written to
/// `stack[top..n]` in topological order. `work` holds per-node marks and
/// must not be reset between calls.
fn ereach<T: Scalar>(
    a: &CscMatrix<T>,
    k: usize,
    parent: &[Option<usize>],
    stack: &mut [usize],
    work: &mut [usize],
) -> usize {
    let n = a.ncols;
    let mut top = n;
    work[k] = k;
    for (i0, _) in a.column(k) {
        if i0 > k {
            continue;
        }
        let mut i = i0;
        let mut len = 0;
        while work[i] != k {
            stack[len] = i;
            len += 1;
            work[i] = k;
            match parent[i] {
                Some(p) => i = p,
                None => break,
            }
        }
        while len > 0 {
            len -= 1;
            top -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

/// Lower-triangular Cholesky factor in compressed column form with the
/// diagonal stored first in every column.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor<T> {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> CholeskyFactor<T> {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn diag(&self, j: usize) -> T {
        self.values[self.col_ptr[j]]
    }

    /// `log det(L L')`
    pub fn log_det(&self) -> T {
        let two = T::lit(2.0);
        (0..self.n).map(|j| two * self.diag(j).ln()).sum()
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower_in_place(&self, x: &mut [T]) {
        for j in 0..self.n {
            let p0 = self.col_ptr[j];
            x[j] /= self.values[p0];
            let xj = x[j];
            if xj == T::zero() {
                continue;
            }
            for p in (p0 + 1)..self.col_ptr[j + 1] {
                x[self.row_idx[p]] -= self.values[p] * xj;
            }
        }
    }

    /// Solves `L' x = b` in place.
    pub fn solve_upper_in_place(&self, x: &mut [T]) {
        for j in (0..self.n).rev() {
            let p0 = self.col_ptr[j];
            let mut s = x[j];
            for p in (p0 + 1)..self.col_ptr[j + 1] {
                s -= self.values[p] * x[self.row_idx[p]];
            }
            x[j] = s / self.values[p0];
        }
    }

    /// Solves `L L' x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }

    /// The factor as a general sparse matrix.
    pub fn to_csc(&self) -> CscMatrix<T> {
        CscMatrix {
            nrows: self.n,
            ncols: self.n,
            col_ptr: self.col_ptr.clone(),
            row_idx: self.row_idx.clone(),
            values: self.values.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_chol(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut l = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut d = a[j][j];
            for k in 0..j {
                d -= l[j][k] * l[j][k];
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
        l
    }

    fn arrow(n: usize) -> Vec<(usize, usize, f64)> {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0 + i as f64));
            if i > 0 {
                t.push((0, i, 1.0));
                t.push((i, 0, 1.0));
            }
            if i + 1 < n {
                t.push((i, i + 1, -0.5));
                t.push((i + 1, i, -0.5));
            }
        }
        t
    }

    #[test]
    fn triplets_merge_duplicates() {
        let m = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 0, 2.0), (0, 0, 3.0)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 0), 4.0);
        assert_eq!(m.get(1, 0), 2.0);
        assert_eq!(m.get(0, 1), 0.0);
    }

    #[test]
    fn factor_matches_dense() {
        let n = 7;
        let a = CscMatrix::from_triplets(n, n, &arrow(n)).unwrap();
        let sym = SymbolicCholesky::analyze(&a).unwrap();
        let f = sym.factor(&a).unwrap();
        let l = dense_chol(&a.to_dense());
        let lc = f.to_csc();
        assert!(lc.is_lower_triangular());
        for i in 0..n {
            for j in 0..n {
                assert!((lc.get(i, j) - l[i][j]).abs() < 1e-12);
            }
        }
        let b: Vec<f64> = (0..n).map(|i| i as f64 - 2.0).collect();
        let x = f.solve(&b);
        let ax = a.mul_vec(&x);
        for i in 0..n {
            assert!((ax[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_is_rejected() {
        let a = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)])
            .unwrap();
        let sym = SymbolicCholesky::analyze(&a).unwrap();
        assert_eq!(sym.factor(&a), Err(Error::NotPositiveDefinite { pivot: 1 }));
    }

    #[test]
    fn single_precision_factor() {
        let n = 5;
        let t: Vec<(usize, usize, f32)> = arrow(n).into_iter().map(|(i, j, v)| (i, j, v as f32)).collect();
        let a = CscMatrix::from_triplets(n, n, &t).unwrap();
        let f = SymbolicCholesky::analyze(&a).unwrap().factor(&a).unwrap();
        let x = f.solve(&[1.0; 5]);
        let ax = a.mul_vec(&x);
        assert!(ax.iter().all(|v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn transpose_and_product() {
        let a = CscMatrix::from_triplets(3, 2, &[(0, 0, 1.0), (2, 0, 2.0), (1, 1, 3.0)]).unwrap();
        let at = a.transpose();
        assert_eq!(at.get(0, 2), 2.0);
        let ata = at.mul(&a).unwrap();
        assert_eq!(ata.get(0, 0), 5.0);
        assert_eq!(ata.get(1, 1), 9.0);
        assert_eq!(ata.get(0, 1), 0.0);
        assert_eq!(a.tr_mul_vec(&[1.0, 1.0, 1.0]), vec![3.0, 3.0]);
    }
}
