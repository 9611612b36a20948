//! Real-time stage: a receding-horizon loop that re-dispatches quarter-hour
//! deviations from the day-ahead plan as prices and load realize.
//!
//! Each hour the controller solves one window QP over the next
//! `4 * horizon` slots (truncated at the day end), implements the first
//! four slots, advances the per-prosumer energy state, and repeats.
//! Deviations are settled at the real-time price plus an imbalance charge
//! whose direction depends on whether the deviation helps or hurts the
//! system-wide position.

use alloc::vec;
use alloc::vec::Vec;

use crate::da::DaSolution;
use crate::fmath;
use crate::linalg::{sym_eigen, DenseMatrix};
use crate::prices::rt_window_covariance;
use crate::prosumer::{Prosumer, ProsumerError};
use crate::qp::sparse::SparseMatrix;
use crate::qp::{QpError, QpProblem, QpSettings, QpSolver, QpStatus, WarmStart};
use crate::timegrid::{MpcWindow, TimeGrid};
use crate::{MWH_PER_KWH, RT_STEP_HOURS};

/// Penalty on the per-prosumer feasibility slack. High enough that slack
/// engages only when the energy requirements are genuinely out of reach.
pub const SLACK_PENALTY_USD_PER_KWH: f64 = 1e4;

/// Tie-break regularization; see the day-ahead stage for the rationale.
/// Keeping the plan when prices give no reason to move depends on it: the
/// quadratic pulls every free deviation back to zero.
const RT_TIEBREAK_EPS: f64 = 1e-8;

/// Tiny linear cost keeping the imbalance envelope variable glued to
/// `max(s * dg, 0)` even when the regime premia cancel and its natural
/// coefficient is zero. Price distortion ~4e-5 $/MWh, far below reporting
/// precision.
const ENV_TIEBREAK_USD_PER_KW: f64 = 1e-8;

/// Energy settled by 1 kW held over one real-time slot, in MWh.
const SLOT_MWH_PER_KW: f64 = RT_STEP_HOURS * MWH_PER_KWH;

/// Two-price imbalance regime: `delta_minus` is charged on deviations that
/// widen the system imbalance, `delta_plus` is paid out on deviations that
/// narrow it (both $/MWh). Convexity of the settlement requires
/// `delta_plus <= delta_minus`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImbalanceRegime {
    pub delta_plus: f64,
    pub delta_minus: f64,
}

impl ImbalanceRegime {
    /// Single-price market: deviations settle at the real-time price alone.
    pub fn caiso() -> Self {
        Self { delta_plus: 0.0, delta_minus: 0.0 }
    }

    /// Symmetric two-price market: the same premium on both directions.
    pub fn uk(delta: f64) -> Self {
        Self { delta_plus: delta, delta_minus: delta }
    }

    /// Asymmetric two-price market: harmful deviations pay more than
    /// helpful ones earn.
    pub fn germany(delta_plus: f64, delta_minus: f64) -> Self {
        Self { delta_plus, delta_minus }
    }

    pub fn validate(&self) -> Result<(), RtError> {
        let ok = self.delta_plus.is_finite()
            && self.delta_minus.is_finite()
            && self.delta_plus >= 0.0
            && self.delta_minus >= 0.0
            && self.delta_plus <= self.delta_minus;
        if ok {
            Ok(())
        } else {
            Err(RtError::BadRegime)
        }
    }
}

/// Itemized imbalance settlement for one deviation. `cases` splits the
/// total by (system state, deviation direction):
/// `[short_pay, short_earn, long_earn, long_pay]`; earn entries are <= 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImbalanceCharge {
    pub total_usd: f64,
    pub cases: [f64; 4],
}

/// Settlement for holding a `dg_kw` deviation over `dt_hours`, given the
/// realized real-time price and the day-ahead reference. The sign of
/// `p_rt - p_da` decides whether the system is short (positive) or long
/// (negative); at a tie the charge is exactly zero.
pub fn imbalance_cost(
    dg_kw: f64,
    p_rt_usd_mwh: f64,
    p_da_usd_mwh: f64,
    dt_hours: f64,
    regime: &ImbalanceRegime,
) -> ImbalanceCharge {
    let e_mwh = dg_kw * dt_hours * MWH_PER_KWH;
    let mut cases = [0.0f64; 4];
    if p_rt_usd_mwh > p_da_usd_mwh {
        // System short: extra consumption widens the gap, reduction helps.
        if e_mwh > 0.0 {
            cases[0] = regime.delta_minus * e_mwh;
        } else {
            cases[1] = regime.delta_plus * e_mwh;
        }
    } else if p_rt_usd_mwh < p_da_usd_mwh {
        // System long: extra consumption absorbs surplus, reduction widens.
        if e_mwh > 0.0 {
            cases[2] = -regime.delta_plus * e_mwh;
        } else {
            cases[3] = -regime.delta_minus * e_mwh;
        }
    }
    ImbalanceCharge { total_usd: cases.iter().sum(), cases }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RtError {
    BadRegime,
    /// Input vectors disagree with the pool size, window length, or day
    /// length.
    ShapeMismatch,
    CovarianceNotPsd,
    BadLambda,
    BadSlackPenalty,
    InvalidProsumer { id: u32, err: ProsumerError },
    Qp(QpError),
    /// Window solve did not reach optimality; `hour` is 0 for standalone
    /// window solves.
    Solver { hour: usize, status: QpStatus, prim_res: f64, dual_res: f64 },
    /// An unplugged slot came back with a non-negligible EV deviation —
    /// indicates corrupted bounds rather than solver noise.
    ResidualEv { id: u32, slot: usize, value: f64 },
}

impl From<QpError> for RtError {
    fn from(e: QpError) -> Self {
        RtError::Qp(e)
    }
}

/// One receding-horizon window, fully specified. `positions` of `window`
/// index the full-day (`4T`) vectors; the price/covariance fields are
/// window-length.
pub struct RtWindow<'a> {
    pub grid: &'a TimeGrid,
    pub window: MpcWindow,
    pub prosumers: &'a [Prosumer],
    /// Day-ahead plans upsampled to rt resolution, per prosumer, length 4T.
    pub g_da_up_kw: &'a [Vec<f64>],
    pub ev_da_up_kw: &'a [Vec<f64>],
    /// Battery-side energy already charged before the window, per prosumer.
    pub e_past_kwh: &'a [f64],
    /// Realized-minus-forecast net load, per prosumer, length 4T; zero for
    /// slots whose realization is not yet known.
    pub net_dev_kw: &'a [Vec<f64>],
    /// Prices over the window slots ($/MWh).
    pub p_rt_usd_mwh: &'a [f64],
    pub p_da_usd_mwh: &'a [f64],
    /// Price-error covariance over the window slots, ($/MWh)^2.
    pub cov: &'a DenseMatrix,
    pub lambda: f64,
    pub regime: ImbalanceRegime,
    pub slack_penalty_usd_per_kwh: f64,
}

#[derive(Debug, Clone)]
pub struct RtStepSolution {
    /// Grid / EV deviations over the window, per prosumer (kW).
    pub dg_kw: Vec<Vec<f64>>,
    pub dev_kw: Vec<Vec<f64>>,
    /// Aggregates recomputed as exact sums.
    pub dg_agg_kw: Vec<f64>,
    pub dev_agg_kw: Vec<f64>,
    /// Imbalance envelope per slot: equals `max(s * dg_agg, 0)` at the
    /// optimum, where `s` is the sign of `p_rt - p_da`.
    pub env_kw: Vec<f64>,
    /// Feasibility slack per prosumer (kWh); nonzero only when a cumulative
    /// energy requirement is unreachable.
    pub slack_kwh: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub polished: bool,
    /// Raw primal/dual vectors, kept so the next window can warm start.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Column/row bookkeeping for the window QP. Variables: per-prosumer grid
/// and EV deviations, aggregate copies, one imbalance envelope per slot,
/// and one slack per prosumer. Rows: per-prosumer blocks first, coupling
/// last.
struct RtLayout {
    n: usize,
    w: usize,
}

impl RtLayout {
    fn dg(&self, i: usize, k: usize) -> usize {
        i * self.w + k
    }
    fn dev(&self, i: usize, k: usize) -> usize {
        self.n * self.w + i * self.w + k
    }
    fn dg_agg(&self, k: usize) -> usize {
        2 * self.n * self.w + k
    }
    fn dev_agg(&self, k: usize) -> usize {
        2 * self.n * self.w + self.w + k
    }
    fn env(&self, k: usize) -> usize {
        2 * self.n * self.w + 2 * self.w + k
    }
    fn slack(&self, i: usize) -> usize {
        2 * self.n * self.w + 3 * self.w + i
    }
    fn num_vars(&self) -> usize {
        2 * self.n * self.w + 3 * self.w + self.n
    }

    fn row_balance(&self, i: usize, k: usize) -> usize {
        i * (5 * self.w + 1) + k
    }
    fn row_dg_box(&self, i: usize, k: usize) -> usize {
        i * (5 * self.w + 1) + self.w + k
    }
    fn row_dev_box(&self, i: usize, k: usize) -> usize {
        i * (5 * self.w + 1) + 2 * self.w + k
    }
    fn row_cum_lo(&self, i: usize, k: usize) -> usize {
        i * (5 * self.w + 1) + 3 * self.w + k
    }
    fn row_cum_hi(&self, i: usize, k: usize) -> usize {
        i * (5 * self.w + 1) + 4 * self.w + k
    }
    fn row_slack_box(&self, i: usize) -> usize {
        i * (5 * self.w + 1) + 5 * self.w
    }
    fn row_agg_g(&self, k: usize) -> usize {
        self.n * (5 * self.w + 1) + k
    }
    fn row_agg_ev(&self, k: usize) -> usize {
        self.n * (5 * self.w + 1) + self.w + k
    }
    fn row_env_link(&self, k: usize) -> usize {
        self.n * (5 * self.w + 1) + 2 * self.w + k
    }
    fn row_env_box(&self, k: usize) -> usize {
        self.n * (5 * self.w + 1) + 3 * self.w + k
    }
    fn num_rows(&self) -> usize {
        self.n * (5 * self.w + 1) + 4 * self.w
    }
}

fn rt_settings() -> QpSettings {
    // The slack penalty puts 1e4-scale coefficients in the objective, so a
    // purely absolute dual tolerance would demand ~1e-12 relative accuracy.
    // Windows whose cumulative-energy rows pin deviations from both sides
    // are heavily degenerate, and the dual split across such rows settles
    // no further than ~1e-7 relative; insisting on more buys nothing for
    // the implemented quantities while polish recovers machine-precision
    // vertices whenever the active set resolves.
    QpSettings { eps_abs: 1e-8, eps_rel: 1e-7, max_iter: 200_000, ..QpSettings::default() }
}

pub fn solve_rt_step(
    rt: &RtWindow<'_>,
    warm: Option<&WarmStart>,
) -> Result<RtStepSolution, RtError> {
    let n = rt.prosumers.len();
    let w = rt.window.len;
    let rt_len = rt.grid.rt_len();
    let lay = RtLayout { n, w };

    rt.regime.validate()?;
    if n == 0
        || rt.g_da_up_kw.len() != n
        || rt.ev_da_up_kw.len() != n
        || rt.e_past_kwh.len() != n
        || rt.net_dev_kw.len() != n
        || rt.p_rt_usd_mwh.len() != w
        || rt.p_da_usd_mwh.len() != w
        || rt.cov.nrows() != w
        || rt.cov.ncols() != w
        || rt.window.start + w - 1 > rt_len
    {
        return Err(RtError::ShapeMismatch);
    }
    for i in 0..n {
        if rt.g_da_up_kw[i].len() != rt_len
            || rt.ev_da_up_kw[i].len() != rt_len
            || rt.net_dev_kw[i].len() != rt_len
        {
            return Err(RtError::ShapeMismatch);
        }
    }
    if !(rt.lambda >= 0.0 && rt.lambda.is_finite()) {
        return Err(RtError::BadLambda);
    }
    if !(rt.slack_penalty_usd_per_kwh > 0.0 && rt.slack_penalty_usd_per_kwh.is_finite()) {
        return Err(RtError::BadSlackPenalty);
    }
    if rt.cov.max_abs() > 0.0 {
        let min = sym_eigen(rt.cov).values.first().copied().unwrap_or(0.0);
        if min < -1e-8 * rt.cov.max_abs().max(1.0) {
            return Err(RtError::CovarianceNotPsd);
        }
    }

    // Imbalance sign per slot: +1 when the system is short (rt above da),
    // -1 when long, 0 at a tie.
    let sign: Vec<f64> = (0..w)
        .map(|k| {
            if rt.p_rt_usd_mwh[k] > rt.p_da_usd_mwh[k] {
                1.0
            } else if rt.p_rt_usd_mwh[k] < rt.p_da_usd_mwh[k] {
                -1.0
            } else {
                0.0
            }
        })
        .collect();

    // Objective. The two-price settlement decomposes as
    //   s * delta_plus * dg + (delta_minus - delta_plus) * max(s * dg, 0),
    // a plain linear term on the aggregate plus a nonnegative envelope
    // (linked below by `env >= s * dg`), so symmetric regimes stay purely
    // linear and the asymmetric part is strictly convex.
    let mut q = vec![0.0f64; lay.num_vars()];
    let env_cost =
        (rt.regime.delta_minus - rt.regime.delta_plus) * SLOT_MWH_PER_KW + ENV_TIEBREAK_USD_PER_KW;
    for k in 0..w {
        q[lay.dg_agg(k)] =
            (rt.p_rt_usd_mwh[k] + sign[k] * rt.regime.delta_plus) * SLOT_MWH_PER_KW;
        q[lay.env(k)] = env_cost;
    }
    for i in 0..n {
        q[lay.slack(i)] = rt.slack_penalty_usd_per_kwh;
    }
    let mut p_trip: Vec<(usize, usize, f64)> = Vec::new();
    let risk_scale = rt.lambda * SLOT_MWH_PER_KW * SLOT_MWH_PER_KW;
    if risk_scale > 0.0 {
        for a in 0..w {
            for b in 0..w {
                let v = risk_scale * rt.cov.get(a, b);
                if v != 0.0 {
                    p_trip.push((lay.dg_agg(a), lay.dg_agg(b), v));
                }
            }
        }
    }
    for c in 0..lay.num_vars() {
        p_trip.push((c, c, 2.0 * RT_TIEBREAK_EPS));
    }

    let mut a_trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut l = vec![0.0f64; lay.num_rows()];
    let mut u = vec![0.0f64; lay.num_rows()];
    for (i, p) in rt.prosumers.iter().enumerate() {
        let g_da = &rt.g_da_up_kw[i];
        let ev_da = &rt.ev_da_up_kw[i];
        let step_kwh = p.eta * RT_STEP_HOURS;
        let mut cum_da = 0.0f64;
        for (k, a) in rt.window.positions().enumerate() {
            // Balance: the grid deviation absorbs the EV deviation plus
            // whatever the net load did relative to forecast.
            let r = lay.row_balance(i, k);
            a_trip.push((r, lay.dg(i, k), 1.0));
            a_trip.push((r, lay.dev(i, k), -1.0));
            l[r] = rt.net_dev_kw[i][a];
            u[r] = rt.net_dev_kw[i][a];

            let r = lay.row_dg_box(i, k);
            a_trip.push((r, lay.dg(i, k), 1.0));
            l[r] = p.g_lo_kw - g_da[a];
            u[r] = p.g_hi_kw - g_da[a];

            let r = lay.row_dev_box(i, k);
            a_trip.push((r, lay.dev(i, k), 1.0));
            if p.plugged_rt(a) {
                l[r] = p.ev_lo_rt_kw[a] - ev_da[a];
                u[r] = p.ev_hi_rt_kw[a] - ev_da[a];
            } else {
                l[r] = 0.0;
                u[r] = 0.0;
            }

            // Cumulative energy, split one-sided so the slack can relax
            // both directions with a single nonnegative variable.
            cum_da += step_kwh * ev_da[a];
            let base = rt.e_past_kwh[i] + cum_da;
            let r = lay.row_cum_lo(i, k);
            for j in 0..=k {
                a_trip.push((r, lay.dev(i, j), step_kwh));
            }
            a_trip.push((r, lay.slack(i), 1.0));
            l[r] = p.ev_cum_lo_rt_kwh[a] - base;
            u[r] = f64::INFINITY;
            let r = lay.row_cum_hi(i, k);
            for j in 0..=k {
                a_trip.push((r, lay.dev(i, j), step_kwh));
            }
            a_trip.push((r, lay.slack(i), -1.0));
            l[r] = f64::NEG_INFINITY;
            u[r] = p.ev_cum_hi_rt_kwh[a] - base;
        }
        let r = lay.row_slack_box(i);
        a_trip.push((r, lay.slack(i), 1.0));
        l[r] = 0.0;
        u[r] = f64::INFINITY;
    }
    for k in 0..w {
        let r = lay.row_agg_g(k);
        for i in 0..n {
            a_trip.push((r, lay.dg(i, k), 1.0));
        }
        a_trip.push((r, lay.dg_agg(k), -1.0));
        l[r] = 0.0;
        u[r] = 0.0;
        let r = lay.row_agg_ev(k);
        for i in 0..n {
            a_trip.push((r, lay.dev(i, k), 1.0));
        }
        a_trip.push((r, lay.dev_agg(k), -1.0));
        l[r] = 0.0;
        u[r] = 0.0;
        // Envelope: env >= s * dg_agg and env >= 0. The dg coefficient is
        // kept in the pattern even at s = 0 so every window shares one
        // sparsity structure. The variable only has work to do when the
        // premium is asymmetric AND the slot has a settled sign; otherwise
        // its objective coefficient is (near) zero and the pair of rows is
        // pure degenerate freight, so the link row is disarmed and the box
        // tightens to an equality that parks the variable at zero.
        let r = lay.row_env_link(k);
        a_trip.push((r, lay.env(k), 1.0));
        a_trip.push((r, lay.dg_agg(k), -sign[k]));
        let inert = sign[k] == 0.0 || rt.regime.delta_minus == rt.regime.delta_plus;
        l[r] = if inert { f64::NEG_INFINITY } else { 0.0 };
        u[r] = f64::INFINITY;
        let r = lay.row_env_box(k);
        a_trip.push((r, lay.env(k), 1.0));
        l[r] = 0.0;
        u[r] = if inert { 0.0 } else { f64::INFINITY };
    }

    let nv = lay.num_vars();
    let qp = QpProblem::new(
        SparseMatrix::from_triplets(nv, nv, &p_trip),
        q,
        SparseMatrix::from_triplets(lay.num_rows(), nv, &a_trip),
        l,
        u,
    )?;
    let mut solver = QpSolver::new(qp, rt_settings())?;
    let res = solver.solve(warm);
    if res.status != QpStatus::Optimal {
        return Err(RtError::Solver {
            hour: 0,
            status: res.status,
            prim_res: res.prim_res,
            dual_res: res.dual_res,
        });
    }

    let mut dg_kw = Vec::with_capacity(n);
    let mut dev_kw = Vec::with_capacity(n);
    for i in 0..n {
        dg_kw.push((0..w).map(|k| res.x[lay.dg(i, k)]).collect::<Vec<f64>>());
        dev_kw.push((0..w).map(|k| res.x[lay.dev(i, k)]).collect::<Vec<f64>>());
    }
    let dg_agg_kw: Vec<f64> =
        (0..w).map(|k| dg_kw.iter().map(|d| d[k]).sum::<f64>()).collect();
    let dev_agg_kw: Vec<f64> =
        (0..w).map(|k| dev_kw.iter().map(|d| d[k]).sum::<f64>()).collect();

    // At the optimum the envelope sits exactly on max(s*dg_agg, 0), so
    // report that identity; the solved variable is parked at zero whenever
    // its cost coefficient vanishes.
    let env_kw: Vec<f64> =
        (0..w).map(|k| (sign[k] * dg_agg_kw[k]).max(0.0)).collect();

    Ok(RtStepSolution {
        dg_kw,
        dev_kw,
        dg_agg_kw,
        dev_agg_kw,
        env_kw,
        slack_kwh: (0..n).map(|i| res.x[lay.slack(i)]).collect(),
        objective: res.objective,
        iterations: res.iterations,
        polished: res.polished,
        x: res.x,
        y: res.y,
    })
}

/// Day-level inputs for the receding-horizon loop. The realized rt price
/// vector is revealed hour by hour; slots beyond the current hour use the
/// forecast vector instead.
#[derive(Debug, Clone)]
pub struct RtDayInputs {
    /// Cleared day-ahead prices, $/MWh, length T (imbalance reference).
    pub prices_da_usd_mwh: Vec<f64>,
    /// Realized real-time prices, $/MWh, length 4T.
    pub prices_rt_usd_mwh: Vec<f64>,
    /// Real-time price forecast used for not-yet-realized slots, length 4T.
    pub prices_rt_forecast_usd_mwh: Vec<f64>,
    /// Price-error covariance template, at least `4 * horizon` square;
    /// each window uses its leading principal submatrix.
    pub cov_rt: DenseMatrix,
    pub lambda: f64,
    pub regime: ImbalanceRegime,
    pub slack_penalty_usd_per_kwh: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcTrace {
    /// Implemented deviations, per prosumer, full day (4T).
    pub dg_kw: Vec<Vec<f64>>,
    pub dev_kw: Vec<Vec<f64>>,
    /// Aggregate implemented deviations (exact sums), length 4T.
    pub dg_agg_kw: Vec<f64>,
    pub dev_agg_kw: Vec<f64>,
    /// Energy state per prosumer at the start of each hour (T rows of N).
    pub e_past_kwh: Vec<Vec<f64>>,
    /// Solver effort per hour.
    pub iterations: Vec<usize>,
    pub polished: Vec<bool>,
    pub warm_used: Vec<bool>,
    /// Window objective per hour (deviation cost over the whole window,
    /// not just the implemented slots).
    pub objectives: Vec<f64>,
    /// Total feasibility slack per hour (kWh).
    pub slack_kwh: Vec<f64>,
}

/// Residual EV deviations above this on unplugged slots are treated as an
/// input error; below, they are snapped to exactly zero.
const UNPLUGGED_SNAP_TOL: f64 = 1e-8;

pub fn run_mpc(
    grid: &TimeGrid,
    prosumers: &[Prosumer],
    da: &DaSolution,
    inputs: &RtDayInputs,
    warm: bool,
) -> Result<MpcTrace, RtError> {
    let t = grid.t();
    let rt_len = grid.rt_len();
    let n = prosumers.len();
    inputs.regime.validate()?;
    if n == 0
        || da.g_kw.len() != n
        || da.ev_kw.len() != n
        || inputs.prices_da_usd_mwh.len() != t
        || inputs.prices_rt_usd_mwh.len() != rt_len
        || inputs.prices_rt_forecast_usd_mwh.len() != rt_len
        || inputs.cov_rt.nrows() < 4 * grid.horizon_hours()
        || inputs.cov_rt.nrows() != inputs.cov_rt.ncols()
    {
        return Err(RtError::ShapeMismatch);
    }
    for p in prosumers {
        p.validate(grid).map_err(|err| RtError::InvalidProsumer { id: p.id, err })?;
    }

    let g_da_up: Vec<Vec<f64>> =
        da.g_kw.iter().map(|g| grid.upsample_hourly(g)).collect();
    let ev_da_up: Vec<Vec<f64>> =
        da.ev_kw.iter().map(|e| grid.upsample_hourly(e)).collect();
    let p_da_up = grid.upsample_hourly(&inputs.prices_da_usd_mwh);
    let net_rt: Vec<Vec<f64>> = prosumers.iter().map(|p| p.net_load_rt_kw()).collect();
    let net_da_up: Vec<Vec<f64>> =
        prosumers.iter().map(|p| grid.upsample_hourly(&p.net_load_da_kw())).collect();

    let mut e_past = vec![0.0f64; n];
    let mut net_dev = vec![vec![0.0f64; rt_len]; n];
    let mut trace = MpcTrace {
        dg_kw: vec![vec![0.0; rt_len]; n],
        dev_kw: vec![vec![0.0; rt_len]; n],
        dg_agg_kw: vec![0.0; rt_len],
        dev_agg_kw: vec![0.0; rt_len],
        e_past_kwh: Vec::with_capacity(t),
        iterations: Vec::with_capacity(t),
        polished: Vec::with_capacity(t),
        warm_used: Vec::with_capacity(t),
        objectives: Vec::with_capacity(t),
        slack_kwh: Vec::with_capacity(t),
    };
    let mut prev: Option<(MpcWindow, RtStepSolution)> = None;

    for h in 1..=t {
        let window = grid.mpc_window(h);
        trace.e_past_kwh.push(e_past.clone());

        // Reveal this hour's realization; future slots keep rhs zero and
        // forecast prices.
        let quarters = grid.hour_to_quarters(h);
        for i in 0..n {
            for &s in &quarters {
                net_dev[i][s - 1] = net_rt[i][s - 1] - net_da_up[i][s - 1];
            }
        }
        let mut p_rt_w = Vec::with_capacity(window.len);
        let mut p_da_w = Vec::with_capacity(window.len);
        for a in window.positions() {
            let realized = grid.quarter_to_hour(a + 1) == h;
            p_rt_w.push(if realized {
                inputs.prices_rt_usd_mwh[a]
            } else {
                inputs.prices_rt_forecast_usd_mwh[a]
            });
            p_da_w.push(p_da_up[a]);
        }
        let cov_w = rt_window_covariance(&inputs.cov_rt, window.len);

        let warm_start = match (&prev, warm) {
            (Some((pw, ps)), true) => Some(shift_warm(&RtLayout { n, w: pw.len }, ps, window.len)),
            _ => None,
        };
        let warm_used = warm_start.is_some();

        let rtw = RtWindow {
            grid,
            window,
            prosumers,
            g_da_up_kw: &g_da_up,
            ev_da_up_kw: &ev_da_up,
            e_past_kwh: &e_past,
            net_dev_kw: &net_dev,
            p_rt_usd_mwh: &p_rt_w,
            p_da_usd_mwh: &p_da_w,
            cov: &cov_w,
            lambda: inputs.lambda,
            regime: inputs.regime,
            slack_penalty_usd_per_kwh: inputs.slack_penalty_usd_per_kwh,
        };
        let mut sol = solve_rt_step(&rtw, warm_start.as_ref()).map_err(|e| match e {
            RtError::Solver { status, prim_res, dual_res, .. } => {
                RtError::Solver { hour: h, status, prim_res, dual_res }
            }
            other => other,
        })?;

        // Implement the first four slots: snap unplugged EV deviations to
        // exactly zero, advance the energy state, and log exact-sum
        // aggregates.
        for (k, &s) in quarters.iter().enumerate() {
            let a = s - 1;
            for i in 0..n {
                let mut dv = sol.dev_kw[i][k];
                if !prosumers[i].plugged_rt(a) {
                    if fmath::abs(dv) > UNPLUGGED_SNAP_TOL {
                        return Err(RtError::ResidualEv { id: prosumers[i].id, slot: s, value: dv });
                    }
                    dv = 0.0;
                    sol.dev_kw[i][k] = 0.0;
                }
                trace.dg_kw[i][a] = sol.dg_kw[i][k];
                trace.dev_kw[i][a] = dv;
                e_past[i] += prosumers[i].eta * RT_STEP_HOURS * (ev_da_up[i][a] + dv);
            }
            trace.dg_agg_kw[a] = (0..n).map(|i| trace.dg_kw[i][a]).sum();
            trace.dev_agg_kw[a] = (0..n).map(|i| trace.dev_kw[i][a]).sum();
        }
        trace.iterations.push(sol.iterations);
        trace.polished.push(sol.polished);
        trace.warm_used.push(warm_used);
        trace.objectives.push(sol.objective);
        trace.slack_kwh.push(sol.slack_kwh.iter().sum());
        prev = Some((window, sol));
    }
    Ok(trace)
}

/// Warm start for the next window from the previous solution: slot-indexed
/// blocks shift left by four slots (one hour), per-prosumer slacks carry
/// over, everything newly exposed starts at zero.
fn shift_warm(prev_lay: &RtLayout, prev: &RtStepSolution, w_new: usize) -> WarmStart {
    let n = prev_lay.n;
    let w_prev = prev_lay.w;
    let new_lay = RtLayout { n, w: w_new };
    let mut x = vec![0.0f64; new_lay.num_vars()];
    let mut y = vec![0.0f64; new_lay.num_rows()];
    let pick = |k: usize| -> Option<usize> {
        let src = k + 4;
        if src < w_prev {
            Some(src)
        } else {
            None
        }
    };
    for k in 0..w_new {
        if let Some(s) = pick(k) {
            for i in 0..n {
                x[new_lay.dg(i, k)] = prev.x[prev_lay.dg(i, s)];
                x[new_lay.dev(i, k)] = prev.x[prev_lay.dev(i, s)];
                y[new_lay.row_balance(i, k)] = prev.y[prev_lay.row_balance(i, s)];
                y[new_lay.row_dg_box(i, k)] = prev.y[prev_lay.row_dg_box(i, s)];
                y[new_lay.row_dev_box(i, k)] = prev.y[prev_lay.row_dev_box(i, s)];
                y[new_lay.row_cum_lo(i, k)] = prev.y[prev_lay.row_cum_lo(i, s)];
                y[new_lay.row_cum_hi(i, k)] = prev.y[prev_lay.row_cum_hi(i, s)];
            }
            x[new_lay.dg_agg(k)] = prev.x[prev_lay.dg_agg(s)];
            x[new_lay.dev_agg(k)] = prev.x[prev_lay.dev_agg(s)];
            x[new_lay.env(k)] = prev.x[prev_lay.env(s)];
            y[new_lay.row_agg_g(k)] = prev.y[prev_lay.row_agg_g(s)];
            y[new_lay.row_agg_ev(k)] = prev.y[prev_lay.row_agg_ev(s)];
            y[new_lay.row_env_link(k)] = prev.y[prev_lay.row_env_link(s)];
            y[new_lay.row_env_box(k)] = prev.y[prev_lay.row_env_box(s)];
        }
    }
    for i in 0..n {
        x[new_lay.slack(i)] = prev.x[prev_lay.slack(i)];
        y[new_lay.row_slack_box(i)] = prev.y[prev_lay.row_slack_box(i)];
    }
    WarmStart { x, y }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::da::{solve_da, DaProblem};
    use crate::prosumer::{synth_pool, FleetSpec, PoolNoise};
    use alloc::vec;
    use approx::assert_abs_diff_eq;

    #[test]
    fn imbalance_sign_table() {
        let reg = ImbalanceRegime::germany(2.0, 8.0);
        let dt = RT_STEP_HOURS;
        // System short (rt 40 over da 30): extra draw pays, reduction earns.
        let c = imbalance_cost(1000.0, 40.0, 30.0, dt, &reg);
        assert_abs_diff_eq!(c.total_usd, 8.0 * 0.25, epsilon = 1e-12);
        assert_eq!(c.cases, [2.0, 0.0, 0.0, 0.0]);
        let c = imbalance_cost(-1000.0, 40.0, 30.0, dt, &reg);
        assert_abs_diff_eq!(c.total_usd, -2.0 * 0.25, epsilon = 1e-12);
        assert_eq!(c.cases, [0.0, -0.5, 0.0, 0.0]);
        // System long (rt 20 under da 30): extra draw earns, reduction pays.
        let c = imbalance_cost(1000.0, 20.0, 30.0, dt, &reg);
        assert_abs_diff_eq!(c.total_usd, -0.5, epsilon = 1e-12);
        assert_eq!(c.cases, [0.0, 0.0, -0.5, 0.0]);
        let c = imbalance_cost(-1000.0, 20.0, 30.0, dt, &reg);
        assert_abs_diff_eq!(c.total_usd, 2.0, epsilon = 1e-12);
        assert_eq!(c.cases, [0.0, 0.0, 0.0, 2.0]);
        // Negative rt price still reads as a long system.
        let c = imbalance_cost(1000.0, -10.0, 30.0, dt, &reg);
        assert_abs_diff_eq!(c.total_usd, -0.5, epsilon = 1e-12);
        let c = imbalance_cost(-1000.0, -10.0, 30.0, dt, &reg);
        assert_abs_diff_eq!(c.total_usd, 2.0, epsilon = 1e-12);
        // Price tie or single-price regime: exactly zero.
        assert_eq!(imbalance_cost(1000.0, 30.0, 30.0, dt, &reg).total_usd, 0.0);
        let caiso = ImbalanceRegime::caiso();
        for dg in [1000.0, -1000.0] {
            for p_rt in [40.0, 20.0, -10.0] {
                assert_eq!(imbalance_cost(dg, p_rt, 30.0, dt, &caiso).total_usd, 0.0);
            }
        }
    }

    #[test]
    fn one_mwh_deviation_frozen_dollars() {
        // 4 MW over a quarter hour = 1 MWh. Symmetric 10 $/MWh premium.
        let reg = ImbalanceRegime::uk(10.0);
        let short = imbalance_cost(4000.0, 35.0, 30.0, RT_STEP_HOURS, &reg);
        assert_abs_diff_eq!(short.total_usd, 10.0, epsilon = 1e-12);
        let helped = imbalance_cost(-4000.0, 35.0, 30.0, RT_STEP_HOURS, &reg);
        assert_abs_diff_eq!(helped.total_usd, -10.0, epsilon = 1e-12);
    }

    #[test]
    fn regime_validation() {
        assert!(ImbalanceRegime::caiso().validate().is_ok());
        assert!(ImbalanceRegime::uk(5.0).validate().is_ok());
        assert!(ImbalanceRegime::germany(2.0, 8.0).validate().is_ok());
        // Reward above penalty would let round trips print money.
        assert_eq!(ImbalanceRegime::germany(8.0, 2.0).validate(), Err(RtError::BadRegime));
        assert_eq!(ImbalanceRegime::uk(-1.0).validate(), Err(RtError::BadRegime));
    }

    /// Single prosumer, one-hour day (window = 4 slots). Slots 3 and 4 are
    /// pinned to the plan; slots 1 and 2 can move +-4 kW around a 4 kW
    /// charging plan, subject to keeping the day's energy. Prices make the
    /// unique optimum sell in slot 1 (rt at 40) and buy back in slot 2
    /// (rt at 20).
    fn two_free_slot_fixture() -> (TimeGrid, Vec<Prosumer>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let grid = TimeGrid::new(1, 1).unwrap();
        let p = Prosumer {
            id: 1,
            eta: 0.9,
            g_lo_kw: -10.0,
            g_hi_kw: 10.0,
            load_da_kw: vec![0.0],
            pv_da_kw: vec![0.0],
            load_rt_kw: vec![0.0; 4],
            pv_rt_kw: vec![0.0; 4],
            ev_lo_rt_kw: vec![0.0, 0.0, 4.0, 4.0],
            ev_hi_rt_kw: vec![8.0, 8.0, 4.0, 4.0],
            ev_cum_lo_rt_kwh: vec![0.0, 0.0, 0.0, 3.6],
            ev_cum_hi_rt_kwh: vec![40.0; 4],
        };
        let g_da_up = vec![vec![4.0; 4]];
        let ev_da_up = vec![vec![4.0; 4]];
        (grid, vec![p], g_da_up, ev_da_up)
    }

    #[test]
    fn window_solution_matches_brute_force_and_splits_exactly() {
        let (grid, pool, g_da_up, ev_da_up) = two_free_slot_fixture();
        let net_dev = vec![vec![0.0; 4]];
        let e_past = vec![0.0];
        let p_rt = vec![40.0, 20.0, 30.0, 30.0];
        let p_da = vec![30.0; 4];
        let cov = DenseMatrix::zeros(4, 4);
        let reg = ImbalanceRegime::uk(5.0);
        let rtw = RtWindow {
            grid: &grid,
            window: grid.mpc_window(1),
            prosumers: &pool,
            g_da_up_kw: &g_da_up,
            ev_da_up_kw: &ev_da_up,
            e_past_kwh: &e_past,
            net_dev_kw: &net_dev,
            p_rt_usd_mwh: &p_rt,
            p_da_usd_mwh: &p_da,
            cov: &cov,
            lambda: 0.0,
            regime: reg,
            slack_penalty_usd_per_kwh: SLACK_PENALTY_USD_PER_KWH,
        };
        let sol = solve_rt_step(&rtw, None).unwrap();

        // Independent check: enumerate the two free deviations on a lattice
        // and price them through the scalar settlement function.
        let mut best = f64::INFINITY;
        let mut arg = (0.0, 0.0);
        let steps = || (-40..=40).map(|i| i as f64 / 10.0);
        for d0 in steps() {
            for d1 in steps() {
                if d0 + d1 < -1e-12 {
                    continue;
                }
                let mut j = 0.0;
                for (k, d) in [(0usize, d0), (1usize, d1)] {
                    j += p_rt[k] * d * SLOT_MWH_PER_KW;
                    j += imbalance_cost(d, p_rt[k], p_da[k], RT_STEP_HOURS, &reg).total_usd;
                }
                if j < best {
                    best = j;
                    arg = (d0, d1);
                }
            }
        }
        assert_abs_diff_eq!(best, -0.03, epsilon = 1e-12);
        assert_eq!(arg, (-4.0, 4.0));
        assert_abs_diff_eq!(sol.objective, best, epsilon = 1e-5);
        assert_abs_diff_eq!(sol.dev_kw[0][0], -4.0, epsilon = 1e-5);
        assert_abs_diff_eq!(sol.dev_kw[0][1], 4.0, epsilon = 1e-5);
        assert_abs_diff_eq!(sol.dev_kw[0][2], 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.dev_kw[0][3], 0.0, epsilon = 1e-7);

        // Envelope variables must sit exactly on max(s * dg, 0); both
        // optimal deviations run against the sign here, so all zero.
        let signs = [1.0, -1.0, 0.0, 0.0];
        for k in 0..4 {
            let want = (signs[k] * sol.dg_agg_kw[k]).max(0.0);
            assert_abs_diff_eq!(sol.env_kw[k], want, epsilon = 1e-6);
        }
        assert!(sol.slack_kwh[0] < 1e-9);
    }

    #[test]
    fn asymmetric_regime_envelope_binds_on_forced_deviations() {
        // EV pinned to the plan; realized net load forces the grid
        // deviation, so the window solve must price it exactly like the
        // scalar settlement function.
        let grid = TimeGrid::new(1, 1).unwrap();
        let p = Prosumer {
            id: 9,
            eta: 0.9,
            g_lo_kw: -10.0,
            g_hi_kw: 10.0,
            load_da_kw: vec![0.0],
            pv_da_kw: vec![0.0],
            load_rt_kw: vec![3.0, -2.0, 0.0, 0.0],
            pv_rt_kw: vec![0.0; 4],
            ev_lo_rt_kw: vec![4.0; 4],
            ev_hi_rt_kw: vec![4.0; 4],
            ev_cum_lo_rt_kwh: vec![0.0; 4],
            ev_cum_hi_rt_kwh: vec![40.0; 4],
        };
        let plan = vec![vec![4.0; 4]];
        let net_dev = vec![vec![3.0, -2.0, 0.0, 0.0]];
        let reg = ImbalanceRegime::germany(2.0, 8.0);
        let p_rt = vec![40.0, 20.0, 30.0, 30.0];
        let p_da = vec![30.0; 4];
        let rtw = RtWindow {
            grid: &grid,
            window: grid.mpc_window(1),
            prosumers: &vec![p],
            g_da_up_kw: &plan,
            ev_da_up_kw: &plan,
            e_past_kwh: &[0.0],
            net_dev_kw: &net_dev,
            p_rt_usd_mwh: &p_rt,
            p_da_usd_mwh: &p_da,
            cov: &DenseMatrix::zeros(4, 4),
            lambda: 0.0,
            regime: reg,
            slack_penalty_usd_per_kwh: SLACK_PENALTY_USD_PER_KWH,
        };
        let sol = solve_rt_step(&rtw, None).unwrap();
        // Balance leaves no freedom: dg = net deviation slot by slot.
        assert_abs_diff_eq!(sol.dg_agg_kw[0], 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.dg_agg_kw[1], -2.0, epsilon = 1e-6);
        // Short system, extra draw: envelope carries the deviation.
        assert_abs_diff_eq!(sol.env_kw[0], 3.0, epsilon = 1e-5);
        // Long system, reduced draw: also the hurting direction.
        assert_abs_diff_eq!(sol.env_kw[1], 2.0, epsilon = 1e-5);
        let mut want = 0.0;
        for k in 0..4 {
            let dg = sol.dg_agg_kw[k];
            want += p_rt[k] * dg * SLOT_MWH_PER_KW;
            want += imbalance_cost(dg, p_rt[k], p_da[k], RT_STEP_HOURS, &reg).total_usd;
        }
        assert_abs_diff_eq!(sol.objective, want, epsilon = 1e-6);
    }

    #[test]
    fn unreachable_requirement_engages_slack_by_the_exact_shortfall() {
        let grid = TimeGrid::new(1, 1).unwrap();
        let p = Prosumer {
            id: 3,
            eta: 0.9,
            g_lo_kw: -10.0,
            g_hi_kw: 10.0,
            load_da_kw: vec![0.0],
            pv_da_kw: vec![0.0],
            load_rt_kw: vec![0.0; 4],
            pv_rt_kw: vec![0.0; 4],
            ev_lo_rt_kw: vec![0.0; 4],
            ev_hi_rt_kw: vec![7.4; 4],
            ev_cum_lo_rt_kwh: vec![0.0, 0.0, 0.0, 20.0],
            ev_cum_hi_rt_kwh: vec![40.0; 4],
        };
        let zeros = vec![vec![0.0; 4]];
        let rtw = RtWindow {
            grid: &grid,
            window: grid.mpc_window(1),
            prosumers: &vec![p],
            g_da_up_kw: &zeros,
            ev_da_up_kw: &zeros,
            e_past_kwh: &[0.0],
            net_dev_kw: &zeros,
            p_rt_usd_mwh: &[27.9; 4],
            p_da_usd_mwh: &[30.0; 4],
            cov: &DenseMatrix::zeros(4, 4),
            lambda: 0.0,
            regime: ImbalanceRegime::caiso(),
            slack_penalty_usd_per_kwh: SLACK_PENALTY_USD_PER_KWH,
        };
        let sol = solve_rt_step(&rtw, None).unwrap();
        // Max reachable energy: 0.9 * 0.25 * 7.4 * 4 = 6.66 kWh, 13.34 short.
        for k in 0..4 {
            assert_abs_diff_eq!(sol.dev_kw[0][k], 7.4, epsilon = 1e-4);
        }
        assert_abs_diff_eq!(sol.slack_kwh[0], 20.0 - 6.66, epsilon = 1e-3);
    }

    #[test]
    fn full_coverage_window_with_no_surprises_keeps_the_plan() {
        // Horizon covers the whole (one hour) day, realized prices equal
        // the forecast, loads realize exactly: the plan stays put.
        let (grid, pool, g_da_up, ev_da_up) = two_free_slot_fixture();
        let da = DaSolution {
            g_kw: vec![vec![4.0]],
            ev_kw: vec![vec![4.0]],
            g_agg_kw: vec![4.0],
            ev_agg_kw: vec![4.0],
            price_term_usd: 0.0,
            risk_term_usd2: 0.0,
            objective: 0.0,
            diagnostics: crate::da::DaDiagnostics {
                iterations: 0,
                polished: true,
                prim_res: 0.0,
                dual_res: 0.0,
            },
        };
        let _ = (&g_da_up, &ev_da_up);
        let inputs = RtDayInputs {
            prices_da_usd_mwh: vec![30.0],
            prices_rt_usd_mwh: vec![27.9; 4],
            prices_rt_forecast_usd_mwh: vec![27.9; 4],
            cov_rt: DenseMatrix::zeros(4, 4),
            lambda: 0.0,
            regime: ImbalanceRegime::caiso(),
            slack_penalty_usd_per_kwh: SLACK_PENALTY_USD_PER_KWH,
        };
        let trace = run_mpc(&grid, &pool, &da, &inputs, true).unwrap();
        for a in 0..4 {
            assert_abs_diff_eq!(trace.dg_agg_kw[a], 0.0, epsilon = 1e-6);
            assert_abs_diff_eq!(trace.dev_agg_kw[a], 0.0, epsilon = 1e-6);
        }
        assert_eq!(trace.iterations.len(), 1);
        assert!(trace.slack_kwh[0] < 1e-9);
    }

    fn mpc_day_fixture() -> (TimeGrid, Vec<Prosumer>, DaSolution, RtDayInputs) {
        let grid = TimeGrid::new(24, 3).unwrap();
        let agg_load: Vec<f64> =
            (0..24).map(|h| 6.0 + 2.0 * ((h % 5) as f64 - 2.0)).collect();
        let agg_pv: Vec<f64> =
            (0..24).map(|h| if (8..18).contains(&h) { 3.0 } else { 0.0 }).collect();
        let pool = synth_pool(
            3,
            &grid,
            &agg_load,
            &agg_pv,
            &FleetSpec::default(),
            &PoolNoise { share_spread: 0.2, rt_sigma: 0.05 },
            42,
        );
        let p_da: Vec<f64> = (0..24).map(|h| 30.0 + 4.0 * ((h % 7) as f64 - 3.0)).collect();
        let mut cov = DenseMatrix::identity(24);
        for v in cov.data_mut() {
            *v *= 9.0;
        }
        let da = solve_da(
            &DaProblem::new(grid.clone(), pool.clone(), p_da.clone(), cov, 1.0).unwrap(),
        )
        .unwrap();
        let p_da_up = grid.upsample_hourly(&p_da);
        let forecast: Vec<f64> = p_da_up.iter().map(|p| 0.93 * p).collect();
        let realized: Vec<f64> = forecast
            .iter()
            .enumerate()
            .map(|(s, p)| p + 1.5 * ((s % 7) as f64 - 3.0))
            .collect();
        let mut cov_rt = DenseMatrix::identity(12);
        for v in cov_rt.data_mut() {
            *v *= 16.0;
        }
        let inputs = RtDayInputs {
            prices_da_usd_mwh: p_da,
            prices_rt_usd_mwh: realized,
            prices_rt_forecast_usd_mwh: forecast,
            cov_rt,
            lambda: 1.0,
            regime: ImbalanceRegime::uk(5.0),
            slack_penalty_usd_per_kwh: SLACK_PENALTY_USD_PER_KWH,
        };
        (grid, pool, da, inputs)
    }

    #[test]
    fn mpc_is_deterministic_and_warm_start_matches_cold() {
        let (grid, pool, da, inputs) = mpc_day_fixture();
        let warm_a = run_mpc(&grid, &pool, &da, &inputs, true).unwrap();
        let warm_b = run_mpc(&grid, &pool, &da, &inputs, true).unwrap();
        assert_eq!(warm_a, warm_b);

        let cold = run_mpc(&grid, &pool, &da, &inputs, false).unwrap();
        assert!(warm_a.warm_used.iter().skip(1).all(|&w| w));
        assert!(cold.warm_used.iter().all(|&w| !w));
        for a in 0..grid.rt_len() {
            assert_abs_diff_eq!(warm_a.dg_agg_kw[a], cold.dg_agg_kw[a], epsilon = 1e-4);
            assert_abs_diff_eq!(warm_a.dev_agg_kw[a], cold.dev_agg_kw[a], epsilon = 1e-4);
        }
        assert_eq!(warm_a.iterations.len(), 24);
        assert!(warm_a.slack_kwh.iter().all(|&s| s < 1e-7));
    }

    #[test]
    fn implemented_trajectory_respects_physical_limits() {
        let (grid, pool, da, inputs) = mpc_day_fixture();
        let trace = run_mpc(&grid, &pool, &da, &inputs, true).unwrap();
        for (i, p) in pool.iter().enumerate() {
            let g_up = grid.upsample_hourly(&da.g_kw[i]);
            let ev_up = grid.upsample_hourly(&da.ev_kw[i]);
            let net = p.net_load_rt_kw();
            let mut cum = 0.0;
            for a in 0..grid.rt_len() {
                let g = g_up[a] + trace.dg_kw[i][a];
                let ev = ev_up[a] + trace.dev_kw[i][a];
                // Balance against the realized net load.
                assert_abs_diff_eq!(g, net[a] + ev, epsilon = 1e-6);
                assert!(g >= p.g_lo_kw - 1e-6 && g <= p.g_hi_kw + 1e-6);
                assert!(ev >= p.ev_lo_rt_kw[a] - 1e-6 && ev <= p.ev_hi_rt_kw[a] + 1e-6);
                if !p.plugged_rt(a) {
                    assert_eq!(trace.dev_kw[i][a], 0.0);
                }
                cum += p.eta * RT_STEP_HOURS * ev;
                assert!(cum >= p.ev_cum_lo_rt_kwh[a] - 1e-5);
                assert!(cum <= p.ev_cum_hi_rt_kwh[a] + 1e-5);
            }
        }
    }
}
