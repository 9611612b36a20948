//! Day-ahead stage: one mean-variance program over the whole pool picks
//! hourly grid-exchange and EV-charging profiles for every prosumer.
//!
//! The aggregate exchange enters the objective through explicit aggregate
//! variables tied to the pool by equality rows; that keeps the quadratic
//! cost block at the horizon dimension instead of coupling every pair of
//! prosumers densely.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{sym_eigen, DenseMatrix};
use crate::prosumer::{balance_rows, cum_energy_rows, single_var_rows, Prosumer, ProsumerError};
use crate::qp::sparse::SparseMatrix;
use crate::qp::{QpError, QpProblem, QpSettings, QpSolver, QpStatus};
use crate::timegrid::TimeGrid;
use crate::MWH_PER_KWH;

/// Tie-break regularization on every variable: makes the program strictly
/// convex so ties (identical prosumers, flat prices) resolve to the same
/// point on every run. Small enough to be invisible at reporting
/// precision, yet large enough that the multiplier signature of a
/// tie-losing vertex clears the solver's sign tolerance, so polishing
/// walks off such vertices instead of accepting them.
pub const DA_TIEBREAK_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct DaProblem {
    pub grid: TimeGrid,
    pub prosumers: Vec<Prosumer>,
    /// Forecast day-ahead prices, $/MWh, one per hour.
    pub prices_usd_mwh: Vec<f64>,
    /// Conditioned price-error covariance, ($/MWh)^2, hours x hours.
    pub covariance: DenseMatrix,
    /// Risk aversion weight (0 = risk neutral).
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DaError {
    EmptyPool,
    InvalidProsumer { id: u32, err: ProsumerError },
    /// Named prosumer cannot meet its own constraints; `hour` is the first
    /// hour (1-based) at which the reachable energy window empties.
    InfeasibleProsumer { id: u32, hour: usize },
    PriceShape,
    CovarianceShape,
    CovarianceNotPsd,
    BadLambda,
    Qp(QpError),
    Solver { status: QpStatus, prim_res: f64, dual_res: f64 },
}

impl From<QpError> for DaError {
    fn from(e: QpError) -> Self {
        DaError::Qp(e)
    }
}

#[derive(Debug, Clone)]
pub struct DaDiagnostics {
    pub iterations: usize,
    pub polished: bool,
    pub prim_res: f64,
    pub dual_res: f64,
}

#[derive(Debug, Clone)]
pub struct DaSolution {
    /// Hourly grid exchange per prosumer (kW), pool order.
    pub g_kw: Vec<Vec<f64>>,
    /// Hourly EV charging per prosumer (kW).
    pub ev_kw: Vec<Vec<f64>>,
    /// Aggregate profiles, recomputed as exact sums of the pool columns.
    pub g_agg_kw: Vec<f64>,
    pub ev_agg_kw: Vec<f64>,
    /// Expected energy cost at the forecast prices, $.
    pub price_term_usd: f64,
    /// Cost variance under the price-error covariance, $^2.
    pub risk_term_usd2: f64,
    /// price term + (lambda/2) * risk term: the value actually minimized.
    pub objective: f64,
    pub diagnostics: DaDiagnostics,
}

impl DaProblem {
    pub fn new(
        grid: TimeGrid,
        prosumers: Vec<Prosumer>,
        prices_usd_mwh: Vec<f64>,
        covariance: DenseMatrix,
        lambda: f64,
    ) -> Result<Self, DaError> {
        let t = grid.t();
        if prosumers.is_empty() {
            return Err(DaError::EmptyPool);
        }
        for p in &prosumers {
            p.validate(&grid).map_err(|err| DaError::InvalidProsumer { id: p.id, err })?;
        }
        if prices_usd_mwh.len() != t || prices_usd_mwh.iter().any(|v| !v.is_finite()) {
            return Err(DaError::PriceShape);
        }
        if covariance.nrows() != t || covariance.ncols() != t {
            return Err(DaError::CovarianceShape);
        }
        if !covariance.is_symmetric(1e-9 * covariance.max_abs().max(1.0)) {
            return Err(DaError::CovarianceShape);
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(DaError::BadLambda);
        }
        if covariance.max_abs() > 0.0 {
            let eig = sym_eigen(&covariance);
            let min = eig.values.first().copied().unwrap_or(0.0);
            if min < -1e-8 * covariance.max_abs().max(1.0) {
                return Err(DaError::CovarianceNotPsd);
            }
        }
        Ok(Self { grid, prosumers, prices_usd_mwh, covariance, lambda })
    }
}

/// Column layout helpers; everything hinges on these staying consistent
/// with the assembly below.
struct DaLayout {
    n: usize,
    t: usize,
}

impl DaLayout {
    fn g(&self, i: usize, h: usize) -> usize {
        i * self.t + h
    }
    fn ev(&self, i: usize, h: usize) -> usize {
        self.n * self.t + i * self.t + h
    }
    fn g_agg(&self, h: usize) -> usize {
        2 * self.n * self.t + h
    }
    fn ev_agg(&self, h: usize) -> usize {
        2 * self.n * self.t + self.t + h
    }
    fn num_vars(&self) -> usize {
        2 * self.n * self.t + 2 * self.t
    }
}

pub fn solve_da(problem: &DaProblem) -> Result<DaSolution, DaError> {
    let grid = &problem.grid;
    let t = grid.t();
    let n = problem.prosumers.len();
    let lay = DaLayout { n, t };

    for p in &problem.prosumers {
        if let Err(hour) = p.da_feasible(grid) {
            return Err(DaError::InfeasibleProsumer { id: p.id, hour });
        }
    }

    // Cost: prices hit the aggregate hourly energy (kW over one hour =
    // kWh), risk hits the same profile quadratically.
    let mut q = vec![0.0f64; lay.num_vars()];
    for h in 0..t {
        q[lay.g_agg(h)] = problem.prices_usd_mwh[h] * MWH_PER_KWH;
    }
    let mut p_trip: Vec<(usize, usize, f64)> = Vec::new();
    let risk_scale = problem.lambda * MWH_PER_KWH * MWH_PER_KWH;
    if risk_scale > 0.0 {
        for i in 0..t {
            for j in 0..t {
                let v = risk_scale * problem.covariance.get(i, j);
                if v != 0.0 {
                    p_trip.push((lay.g_agg(i), lay.g_agg(j), v));
                }
            }
        }
    }
    for c in 0..lay.num_vars() {
        p_trip.push((c, c, 2.0 * DA_TIEBREAK_EPS));
    }

    // Rows: prosumer-local blocks first, pool coupling last (keeps the
    // KKT fill bounded under natural ordering).
    let mut a_trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut l = Vec::new();
    let mut u = Vec::new();
    let mut row = 0usize;
    let push_local = |rows: Vec<crate::prosumer::LinearConstraint>,
                          col_of: &dyn Fn(usize) -> usize,
                          a_trip: &mut Vec<(usize, usize, f64)>,
                          l: &mut Vec<f64>,
                          u: &mut Vec<f64>,
                          row: &mut usize| {
        for r in rows {
            for (local_col, v) in r.coeffs {
                a_trip.push((*row, col_of(local_col), v));
            }
            l.push(r.lo);
            u.push(r.hi);
            *row += 1;
        }
    };

    for (i, p) in problem.prosumers.iter().enumerate() {
        let net = p.net_load_da_kw();
        let (ev_lo, ev_hi) = p.ev_power_da_kw(grid);
        let (cum_lo, cum_hi) = p.ev_cum_da_kwh(grid);
        let col_of = |local: usize| -> usize {
            if local < t {
                lay.g(i, local)
            } else {
                lay.ev(i, local - t)
            }
        };
        push_local(balance_rows(t, &net), &col_of, &mut a_trip, &mut l, &mut u, &mut row);
        push_local(
            single_var_rows(0, &vec![p.g_lo_kw; t], &vec![p.g_hi_kw; t]),
            &col_of,
            &mut a_trip,
            &mut l,
            &mut u,
            &mut row,
        );
        push_local(single_var_rows(t, &ev_lo, &ev_hi), &col_of, &mut a_trip, &mut l, &mut u, &mut row);
        push_local(
            cum_energy_rows(t, p.eta, 1.0, &cum_lo, &cum_hi),
            &col_of,
            &mut a_trip,
            &mut l,
            &mut u,
            &mut row,
        );
    }

    // Aggregation identities.
    for h in 0..t {
        for i in 0..n {
            a_trip.push((row, lay.g(i, h), 1.0));
        }
        a_trip.push((row, lay.g_agg(h), -1.0));
        l.push(0.0);
        u.push(0.0);
        row += 1;
    }
    for h in 0..t {
        for i in 0..n {
            a_trip.push((row, lay.ev(i, h), 1.0));
        }
        a_trip.push((row, lay.ev_agg(h), -1.0));
        l.push(0.0);
        u.push(0.0);
        row += 1;
    }

    let nv = lay.num_vars();
    let p_mat = SparseMatrix::from_triplets(nv, nv, &p_trip);
    let a_mat = SparseMatrix::from_triplets(row, nv, &a_trip);
    let qp = QpProblem::new(p_mat, q, a_mat, l, u)?;

    let settings = QpSettings {
        eps_abs: 1e-8,
        eps_rel: 0.0,
        max_iter: 200_000,
        ..QpSettings::default()
    };
    let mut solver = QpSolver::new(qp, settings)?;
    let res = solver.solve(None);
    if res.status != QpStatus::Optimal {
        return Err(DaError::Solver {
            status: res.status,
            prim_res: res.prim_res,
            dual_res: res.dual_res,
        });
    }

    let mut g_kw = Vec::with_capacity(n);
    let mut ev_kw = Vec::with_capacity(n);
    for i in 0..n {
        g_kw.push((0..t).map(|h| res.x[lay.g(i, h)]).collect::<Vec<f64>>());
        ev_kw.push((0..t).map(|h| res.x[lay.ev(i, h)]).collect::<Vec<f64>>());
    }
    // Aggregates re-derived as exact sums; the equality rows hold to
    // solver tolerance, reporting holds to machine precision.
    let g_agg_kw: Vec<f64> =
        (0..t).map(|h| g_kw.iter().map(|g| g[h]).sum::<f64>()).collect();
    let ev_agg_kw: Vec<f64> =
        (0..t).map(|h| ev_kw.iter().map(|e| e[h]).sum::<f64>()).collect();

    let price_term_usd: f64 = (0..t)
        .map(|h| problem.prices_usd_mwh[h] * g_agg_kw[h] * MWH_PER_KWH)
        .sum();
    let risk_term_usd2 =
        MWH_PER_KWH * MWH_PER_KWH * problem.covariance.quad_form(&g_agg_kw);
    let objective = price_term_usd + 0.5 * problem.lambda * risk_term_usd2;

    Ok(DaSolution {
        g_kw,
        ev_kw,
        g_agg_kw,
        ev_agg_kw,
        price_term_usd,
        risk_term_usd2,
        objective,
        diagnostics: DaDiagnostics {
            iterations: res.iterations,
            polished: res.polished,
            prim_res: res.prim_res,
            dual_res: res.dual_res,
        },
    })
}
