//! Convex quadratic programming backend.
//!
//! Problems take the form
//!
//! ```text
//!   minimize    0.5 x' P x + q' x
//!   subject to  l <= A x <= u
//! ```
//!
//! with `P` positive semidefinite and rows with `l == u` acting as
//! equalities. The primary algorithm is an operator-splitting (ADMM)
//! iteration over a sparse quasidefinite KKT factorization, finished by a
//! direct "polish" solve on the detected active set so that returned
//! iterates meet tight absolute tolerances. An independent dense
//! interior-point method doubles as a cross-check oracle for small
//! problems.

mod admm;
mod dense;
pub mod ldl;
pub mod sparse;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

pub use admm::QpSolver;
pub use dense::solve_qp_dense;
pub use sparse::SparseMatrix;

use crate::fmath;

/// Problem data. Construction validates shapes, finiteness, bound order,
/// symmetry of `P`, and positive semidefiniteness of `P` (by attempted
/// regularized factorization).
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub(crate) p: SparseMatrix,
    pub(crate) q: Vec<f64>,
    pub(crate) a: SparseMatrix,
    pub(crate) l: Vec<f64>,
    pub(crate) u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QpError {
    DimensionMismatch(&'static str),
    NonFinite(&'static str),
    /// `l[row] > u[row]`.
    BoundsInverted { row: usize },
    NotSymmetric,
    NotPsd,
    /// Bounds update flipped a row between equality and inequality.
    EqualityPatternChanged { row: usize },
}

impl core::fmt::Display for QpError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            QpError::DimensionMismatch(what) => write!(f, "dimension mismatch: {what}"),
            QpError::NonFinite(what) => write!(f, "non-finite data in {what}"),
            QpError::BoundsInverted { row } => write!(f, "l > u at constraint row {row}"),
            QpError::NotSymmetric => write!(f, "P must be symmetric"),
            QpError::NotPsd => write!(f, "P must be positive semidefinite"),
            QpError::EqualityPatternChanged { row } => {
                write!(f, "bounds update changed equality structure at row {row}")
            }
        }
    }
}

impl core::error::Error for QpError {}

impl QpProblem {
    pub fn new(
        p: SparseMatrix,
        q: Vec<f64>,
        a: SparseMatrix,
        l: Vec<f64>,
        u: Vec<f64>,
    ) -> Result<Self, QpError> {
        let n = q.len();
        let m = l.len();
        if p.nrows() != n || p.ncols() != n {
            return Err(QpError::DimensionMismatch("P must be n x n"));
        }
        if a.ncols() != n || a.nrows() != m || u.len() != m {
            return Err(QpError::DimensionMismatch("A, l, u must agree on m x n"));
        }
        if !p.has_finite_values() {
            return Err(QpError::NonFinite("P"));
        }
        if !a.has_finite_values() {
            return Err(QpError::NonFinite("A"));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("q"));
        }
        if l.iter().any(|v| v.is_nan()) || u.iter().any(|v| v.is_nan()) {
            return Err(QpError::NonFinite("bounds"));
        }
        for i in 0..m {
            if l[i] > u[i] {
                return Err(QpError::BoundsInverted { row: i });
            }
        }
        let scale = p.max_abs().max(1.0);
        if !p.is_symmetric(1e-10 * scale) {
            return Err(QpError::NotSymmetric);
        }
        check_psd(&p)?;
        Ok(Self { p, q, a, l, u })
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.l.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let n = self.num_vars();
        assert_eq!(x.len(), n);
        let mut px = alloc::vec![0.0; n];
        self.p.mul_vec(x, &mut px);
        0.5 * crate::linalg::dot(&px, x) + crate::linalg::dot(&self.q, x)
    }

    pub fn p(&self) -> &SparseMatrix {
        &self.p
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn a(&self) -> &SparseMatrix {
        &self.a
    }

    pub fn lower(&self) -> &[f64] {
        &self.l
    }

    pub fn upper(&self) -> &[f64] {
        &self.u
    }

    /// Plain-text dump (triplet listing) for debugging solver inputs.
    pub fn dump_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "qp n={} m={}", self.num_vars(), self.num_constraints());
        let _ = writeln!(s, "P (row col value):");
        for (i, j, v) in self.p.iter_entries() {
            let _ = writeln!(s, "  {i} {j} {v:.17e}");
        }
        let _ = writeln!(s, "q:");
        for (j, v) in self.q.iter().enumerate() {
            let _ = writeln!(s, "  {j} {v:.17e}");
        }
        let _ = writeln!(s, "A (row col value):");
        for (i, j, v) in self.a.iter_entries() {
            let _ = writeln!(s, "  {i} {j} {v:.17e}");
        }
        let _ = writeln!(s, "bounds (row l u):");
        for i in 0..self.num_constraints() {
            let _ = writeln!(s, "  {i} {:.17e} {:.17e}", self.l[i], self.u[i]);
        }
        s
    }
}

/// PSD test by attempted LDL' of `P + delta I`: any significantly negative
/// pivot rejects the matrix.
fn check_psd(p: &SparseMatrix) -> Result<(), QpError> {
    let n = p.ncols();
    if n == 0 {
        return Ok(());
    }
    let mut diag_max = 0.0f64;
    for j in 0..n {
        diag_max = diag_max.max(fmath::abs(p.get(j, j)));
    }
    let scale = p.max_abs().max(diag_max).max(1.0);
    let delta = 1e-10 * scale;
    let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(p.nnz() / 2 + n);
    for (i, j, v) in p.iter_entries() {
        if i <= j {
            trip.push((i, j, v));
        }
    }
    for k in 0..n {
        trip.push((k, k, delta));
    }
    let upper = SparseMatrix::from_triplets(n, n, &trip);
    let sym = ldl::ldl_symbolic(&upper);
    match ldl::ldl_numeric(&upper, &sym) {
        Ok(fac) => {
            let floor = -1e-7 * scale;
            if fac.diag().iter().any(|&d| d < floor) {
                Err(QpError::NotPsd)
            } else {
                Ok(())
            }
        }
        Err(_) => Err(QpError::NotPsd),
    }
}

/// Solver knobs. The defaults satisfy the tolerances the optimizers rely
/// on; tests override `max_iter` and the tolerances where appropriate.
#[derive(Debug, Clone)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub adaptive_rho: bool,
    pub check_interval: usize,
    pub polish: bool,
    pub scaling_iters: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-8,
            eps_rel: 1e-6,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            check_interval: 25,
            polish: true,
            scaling_iters: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    PrimalInfeasible,
    DualInfeasible,
}

/// Warm-start point in the original (unscaled) coordinates.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QpResult {
    pub x: Vec<f64>,
    /// Dual for each constraint row; positive at active upper bounds,
    /// negative at active lower bounds.
    pub y: Vec<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub prim_res: f64,
    pub dual_res: f64,
    pub iterations: usize,
    pub polished: bool,
    /// Direction certifying infeasibility when status says so.
    pub certificate: Option<Vec<f64>>,
}

/// One-shot convenience wrapper around [`QpSolver`].
pub fn solve_qp(
    problem: &QpProblem,
    settings: &QpSettings,
    warm: Option<&WarmStart>,
) -> Result<QpResult, QpError> {
    let mut solver = QpSolver::new(problem.clone(), settings.clone())?;
    Ok(solver.solve(warm))
}

#[cfg(test)]
mod tests;
