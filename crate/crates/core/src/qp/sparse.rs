//! Compressed-sparse-column matrices, just enough for the QP solver:
//! triplet assembly with duplicate folding, matrix-vector products, row/col
//! scaling, and upper-triangle extraction for the factorization.

use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_ind: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from (row, col, value) triplets; duplicates are summed and
    /// explicit zeros kept out.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut entries: Vec<(usize, usize, f64)> = triplets
            .iter()
            .copied()
            .inspect(|&(r, c, _)| {
                assert!(r < nrows && c < ncols, "triplet ({r},{c}) outside {nrows}x{ncols}");
            })
            .collect();
        entries.sort_unstable_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));

        let mut col_ptr = vec![0usize; ncols + 1];
        let mut row_ind = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut it = entries.into_iter().peekable();
        while let Some((r, c, mut v)) = it.next() {
            while let Some(&(r2, c2, v2)) = it.peek() {
                if r2 == r && c2 == c {
                    v += v2;
                    it.next();
                } else {
                    break;
                }
            }
            if v != 0.0 {
                row_ind.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
            }
        }
        for c in 0..ncols {
            col_ptr[c + 1] += col_ptr[c];
        }
        Self { nrows, ncols, col_ptr, row_ind, values }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, col_ptr: vec![0; ncols + 1], row_ind: Vec::new(), values: Vec::new() }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[j]..self.col_ptr[j + 1];
        self.row_ind[range.clone()].iter().copied().zip(self.values[range].iter().copied())
    }

    /// Entry lookup by binary search; meant for tests and small matrices.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.col_ptr[j]..self.col_ptr[j + 1];
        match self.row_ind[range.clone()].binary_search(&i) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    /// `out = A x`.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(out.len(), self.nrows);
        out.fill(0.0);
        for j in 0..self.ncols {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                out[self.row_ind[p]] += self.values[p] * xj;
            }
        }
    }

    /// `out = A' x`.
    pub fn mul_transpose_vec(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.nrows);
        assert_eq!(out.len(), self.ncols);
        for j in 0..self.ncols {
            let mut acc = 0.0;
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                acc += self.values[p] * x[self.row_ind[p]];
            }
            out[j] = acc;
        }
    }

    /// Scales row `i` by `d[i]` and column `j` by `e[j]` in place.
    pub fn scale(&mut self, row_scale: &[f64], col_scale: &[f64]) {
        assert_eq!(row_scale.len(), self.nrows);
        assert_eq!(col_scale.len(), self.ncols);
        for j in 0..self.ncols {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                self.values[p] *= row_scale[self.row_ind[p]] * col_scale[j];
            }
        }
    }

    pub fn max_abs_per_col(&self, out: &mut [f64]) {
        assert_eq!(out.len(), self.ncols);
        for j in 0..self.ncols {
            let mut m = 0.0f64;
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                m = m.max(fmath::abs(self.values[p]));
            }
            out[j] = m;
        }
    }

    pub fn max_abs_per_row(&self, out: &mut [f64]) {
        assert_eq!(out.len(), self.nrows);
        out.fill(0.0);
        for p in 0..self.values.len() {
            let i = self.row_ind[p];
            out[i] = out[i].max(fmath::abs(self.values[p]));
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| fmath::abs(*v)).fold(0.0, f64::max)
    }

    pub fn iter_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |j| self.col(j).map(move |(i, v)| (i, j, v)))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        self.iter_entries().all(|(i, j, v)| fmath::abs(self.get(j, i) - v) <= tol)
    }

    pub fn has_finite_values(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.iter_entries() {
            d.set(i, j, v);
        }
        d
    }
}
