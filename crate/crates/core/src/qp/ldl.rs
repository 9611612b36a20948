//! Sparse LDL' factorization (up-looking, elimination-tree based) for
//! symmetric matrices given by their upper triangle in CSC form. No
//! pivoting: intended for quasidefinite KKT systems, where every pivot is
//! bounded away from zero by the regularization terms on the diagonal.
//! Elimination order is the natural column order; callers assemble their
//! systems so that local blocks come first and coupling rows last.

use alloc::vec;
use alloc::vec::Vec;

use super::sparse::SparseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZeroPivot {
    pub col: usize,
}

impl core::fmt::Display for ZeroPivot {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "zero pivot in LDL' at column {}", self.col)
    }
}

impl core::error::Error for ZeroPivot {}

/// Pattern-level analysis, reusable across numeric refactorizations.
#[derive(Debug, Clone)]
pub struct LdlSymbolic {
    n: usize,
    parent: Vec<isize>,
    l_col_ptr: Vec<usize>,
}

/// Numeric factors: unit lower-triangular L (by columns, diagonal implicit)
/// and the diagonal D, which may carry negative entries.
#[derive(Debug, Clone)]
pub struct LdlFactors {
    n: usize,
    l_col_ptr: Vec<usize>,
    l_row_ind: Vec<usize>,
    l_values: Vec<f64>,
    d: Vec<f64>,
}

/// Computes the elimination tree and column counts of L for the upper
/// triangle `k_upper` (entries with row <= col).
pub fn ldl_symbolic(k_upper: &SparseMatrix) -> LdlSymbolic {
    let n = k_upper.ncols();
    assert_eq!(k_upper.nrows(), n, "KKT matrix must be square");
    let mut parent = vec![-1isize; n];
    let mut flag = vec![usize::MAX; n];
    let mut lnz = vec![0usize; n];

    for k in 0..n {
        flag[k] = k;
        for (i0, _) in k_upper.col(k) {
            let mut i = i0;
            debug_assert!(i <= k, "entry below the diagonal in upper-triangle input");
            while i < k && flag[i] != k {
                if parent[i] == -1 {
                    parent[i] = k as isize;
                }
                lnz[i] += 1;
                flag[i] = k;
                i = parent[i] as usize;
            }
        }
    }

    let mut l_col_ptr = vec![0usize; n + 1];
    for i in 0..n {
        l_col_ptr[i + 1] = l_col_ptr[i] + lnz[i];
    }
    LdlSymbolic { n, parent, l_col_ptr }
}

/// Numeric factorization over a fixed symbolic pattern. Fails only on an
/// exactly (or subnormally) zero pivot.
pub fn ldl_numeric(k_upper: &SparseMatrix, sym: &LdlSymbolic) -> Result<LdlFactors, ZeroPivot> {
    let n = sym.n;
    assert_eq!(k_upper.ncols(), n);
    let nnz_l = sym.l_col_ptr[n];
    let mut l_row_ind = vec![0usize; nnz_l];
    let mut l_values = vec![0.0f64; nnz_l];
    let mut d = vec![0.0f64; n];

    let mut y = vec![0.0f64; n];
    let mut pattern = vec![0usize; n];
    let mut path = vec![0usize; n];
    let mut flag = vec![usize::MAX; n];
    // Entries written so far into each L column.
    let mut used = vec![0usize; n];

    for k in 0..n {
        let mut top = n;
        flag[k] = k;
        // Scatter column k of the upper triangle into y and collect the
        // reach of its pattern in topological order.
        for (i, v) in k_upper.col(k) {
            y[i] += v;
            if i == k {
                continue;
            }
            let mut len = 0;
            let mut ii = i;
            while flag[ii] != k {
                path[len] = ii;
                len += 1;
                flag[ii] = k;
                ii = sym.parent[ii] as usize;
            }
            while len > 0 {
                len -= 1;
                top -= 1;
                pattern[top] = path[len];
            }
        }

        d[k] = y[k];
        y[k] = 0.0;
        for &i in &pattern[top..n] {
            let yi = y[i];
            y[i] = 0.0;
            let start = sym.l_col_ptr[i];
            let stop = start + used[i];
            for p in start..stop {
                y[l_row_ind[p]] -= l_values[p] * yi;
            }
            let di = d[i];
            let l_ki = yi / di;
            d[k] -= l_ki * yi;
            l_row_ind[stop] = k;
            l_values[stop] = l_ki;
            used[i] += 1;
        }
        if d[k] == 0.0 || !d[k].is_finite() {
            return Err(ZeroPivot { col: k });
        }
    }

    Ok(LdlFactors { n, l_col_ptr: sym.l_col_ptr.clone(), l_row_ind, l_values, d })
}

impl LdlFactors {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz_l(&self) -> usize {
        self.l_values.len()
    }

    /// Solves `K x = b` in place using the stored factors.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        // L z = b
        for j in 0..self.n {
            let bj = b[j];
            if bj != 0.0 {
                for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                    b[self.l_row_ind[p]] -= self.l_values[p] * bj;
                }
            }
        }
        // D w = z
        for j in 0..self.n {
            b[j] /= self.d[j];
        }
        // L' x = w
        for j in (0..self.n).rev() {
            let mut acc = b[j];
            for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                acc -= self.l_values[p] * b[self.l_row_ind[p]];
            }
            b[j] = acc;
        }
    }

    /// Diagonal of D. Signs reveal the inertia of the factored matrix; for
    /// a regularized quasidefinite system the magnitude of a trailing-block
    /// pivot tells whether its row added new information, since rows
    /// dependent on their predecessors collapse onto the bare shift.
    pub fn diag(&self) -> &[f64] {
        &self.d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn upper_from_dense(m: &DenseMatrix) -> SparseMatrix {
        let n = m.nrows();
        let mut trip = alloc::vec::Vec::new();
        for i in 0..n {
            for j in i..n {
                let v = m.get(i, j);
                if v != 0.0 {
                    trip.push((i, j, v));
                }
            }
        }
        SparseMatrix::from_triplets(n, n, &trip)
    }

    fn check_solves(m: &DenseMatrix, tol: f64) {
        let n = m.nrows();
        let upper = upper_from_dense(m);
        let sym = ldl_symbolic(&upper);
        let fac = ldl_numeric(&upper, &sym).expect("factorizable");
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..4 {
            let x_true: alloc::vec::Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut b = alloc::vec![0.0; n];
            m.mul_vec(&x_true, &mut b);
            fac.solve_in_place(&mut b);
            for (a, b) in x_true.iter().zip(b.iter()) {
                assert!((a - b).abs() < tol, "|{a} - {b}| too big");
            }
        }
    }

    #[test]
    fn factors_spd_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20;
        // SPD via B'B + I.
        let mut b = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if rng.gen_bool(0.3) {
                    b.set(i, j, rng.gen_range(-1.0..1.0));
                }
            }
        }
        let mut m = b.transpose().matmul(&b);
        for i in 0..n {
            m.add_to(i, i, 1.0);
        }
        check_solves(&m, 1e-9);
    }

    #[test]
    fn factors_quasidefinite_kkt() {
        // [[P + sigma I, A'], [A, -rho I]] with random sparse A.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, m) = (12, 9);
        let dim = n + m;
        let mut k = DenseMatrix::zeros(dim, dim);
        for i in 0..n {
            k.set(i, i, rng.gen_range(0.1..2.0));
        }
        for r in 0..m {
            for c in 0..n {
                if rng.gen_bool(0.35) {
                    let v = rng.gen_range(-1.5..1.5);
                    k.set(n + r, c, v);
                    k.set(c, n + r, v);
                }
            }
            k.set(n + r, n + r, -rng.gen_range(0.5..2.0));
        }
        check_solves(&k, 1e-8);
    }

    #[test]
    fn reports_zero_pivot() {
        // Leading 1x1 minor is zero: first pivot vanishes.
        let m = DenseMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let upper = upper_from_dense(&m);
        let sym = ldl_symbolic(&upper);
        assert_eq!(ldl_numeric(&upper, &sym).unwrap_err().col, 0);
    }

    #[test]
    fn l_pattern_counts_match_numeric_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 25;
        let mut b = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if rng.gen_bool(0.15) {
                    b.set(i, j, rng.gen_range(-1.0..1.0));
                }
            }
        }
        let mut m = b.transpose().matmul(&b);
        for i in 0..n {
            m.add_to(i, i, 2.0);
        }
        let upper = upper_from_dense(&m);
        let sym = ldl_symbolic(&upper);
        let fac = ldl_numeric(&upper, &sym).unwrap();
        assert_eq!(fac.nnz_l(), sym.l_col_ptr[n]);
    }
}
