//! Operator-splitting solver: ADMM iteration over a factored quasidefinite
//! KKT system, Ruiz equilibration for scale robustness, adaptive penalty,
//! and an active-set polish step that refines converged iterates to direct
//! solver accuracy.

use alloc::vec;
use alloc::vec::Vec;

use super::ldl::{ldl_numeric, ldl_symbolic, LdlFactors, LdlSymbolic};
use super::sparse::SparseMatrix;
use super::{QpError, QpProblem, QpResult, QpSettings, QpStatus, WarmStart};
use crate::fmath;
use crate::linalg::{dot, inf_norm};

/// Penalty on equality rows relative to the base penalty; equalities need a
/// stiffer push to reach tight absolute residuals.
const RHO_EQ_SCALE: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
/// Residual level (relative to the targets) at which polishing is first
/// attempted. Early iterates far from a vertex seed unusable active sets,
/// so wait until the iteration is nearly converged.
const POLISH_TRIGGER: f64 = 30.0;
const MAX_POLISH_ATTEMPTS: usize = 20;
/// Residual checks without meaningful improvement before the iteration
/// counts as stalled and rescue polishing may fire.
const STALL_INTERVALS: usize = 40;
const EPS_INFEASIBLE: f64 = 1e-6;

pub struct QpSolver {
    prob: QpProblem,
    settings: QpSettings,
    n: usize,
    m: usize,
    // Ruiz scaling: x = d .* xbar, y = e .* ybar / c.
    d: Vec<f64>,
    e: Vec<f64>,
    c: f64,
    qs: Vec<f64>,
    a_s: SparseMatrix,
    ls: Vec<f64>,
    us: Vec<f64>,
    eq_row: Vec<bool>,
    rho_base: f64,
    rho: Vec<f64>,
    rho_inv: Vec<f64>,
    sigma: f64,
    kkt_fixed: Vec<(usize, usize, f64)>,
    sym: LdlSymbolic,
    factors: LdlFactors,
    // Rows of the unscaled A, for polish assembly.
    a_rows: Vec<Vec<(usize, f64)>>,
}

impl QpSolver {
    pub fn new(prob: QpProblem, settings: QpSettings) -> Result<Self, QpError> {
        let n = prob.num_vars();
        let m = prob.num_constraints();
        let eq_row: Vec<bool> = (0..m).map(|i| prob.l[i] == prob.u[i]).collect();

        let mut ps = prob.p.clone();
        let mut a_s = prob.a.clone();
        let mut d = vec![1.0f64; n];
        let mut e = vec![1.0f64; m];
        let mut work_n = vec![0.0f64; n];
        let mut work_n2 = vec![0.0f64; n];
        let mut work_m = vec![0.0f64; m];
        for _ in 0..settings.scaling_iters {
            ps.max_abs_per_col(&mut work_n);
            a_s.max_abs_per_col(&mut work_n2);
            let mut dd = vec![1.0f64; n];
            for j in 0..n {
                let norm = work_n[j].max(work_n2[j]);
                if norm > 0.0 {
                    dd[j] = 1.0 / fmath::sqrt(norm.clamp(1e-8, 1e8));
                }
            }
            a_s.max_abs_per_row(&mut work_m);
            let mut ee = vec![1.0f64; m];
            for i in 0..m {
                if work_m[i] > 0.0 {
                    ee[i] = 1.0 / fmath::sqrt(work_m[i].clamp(1e-8, 1e8));
                }
            }
            ps.scale(&dd, &dd);
            a_s.scale(&ee, &dd);
            for j in 0..n {
                d[j] *= dd[j];
            }
            for i in 0..m {
                e[i] *= ee[i];
            }
        }
        // Cost scaling: normalize the larger of the scaled gradient pieces.
        let mut c = 1.0;
        if settings.scaling_iters > 0 {
            ps.max_abs_per_col(&mut work_n);
            let mean_p = if n > 0 { work_n.iter().sum::<f64>() / n as f64 } else { 0.0 };
            let qd_norm = (0..n).map(|j| fmath::abs(prob.q[j] * d[j])).fold(0.0, f64::max);
            let denom = mean_p.max(qd_norm);
            if denom > 1.0 {
                c = 1.0 / denom;
            }
            if c != 1.0 {
                let ones_r = vec![1.0; n];
                let cs = vec![c; n];
                // Scale P by c (rows by c, cols by 1).
                ps.scale(&cs, &ones_r);
            }
        }
        let qs: Vec<f64> = (0..n).map(|j| c * prob.q[j] * d[j]).collect();
        let ls: Vec<f64> = (0..m).map(|i| e[i] * prob.l[i]).collect();
        let us: Vec<f64> = (0..m).map(|i| e[i] * prob.u[i]).collect();

        let rho_base = settings.rho;
        let rho: Vec<f64> = (0..m)
            .map(|i| if eq_row[i] { rho_base * RHO_EQ_SCALE } else { rho_base })
            .collect();
        let rho_inv: Vec<f64> = rho.iter().map(|r| 1.0 / r).collect();

        let mut kkt_fixed: Vec<(usize, usize, f64)> = Vec::with_capacity(ps.nnz() + a_s.nnz() + n);
        for (i, j, v) in ps.iter_entries() {
            if i <= j {
                kkt_fixed.push((i, j, v));
            }
        }
        let sigma = settings.sigma;
        for j in 0..n {
            kkt_fixed.push((j, j, sigma));
        }
        for (i, j, v) in a_s.iter_entries() {
            kkt_fixed.push((j, n + i, v));
        }
        let kkt = assemble_kkt(&kkt_fixed, &rho, n, m);
        let sym = ldl_symbolic(&kkt);
        let factors = match ldl_numeric(&kkt, &sym) {
            Ok(f) => f,
            Err(_) => {
                // A vanishing pivot here is a degenerate scaling artifact;
                // a stiffer sigma always resolves it.
                let mut fixed2 = kkt_fixed.clone();
                for j in 0..n {
                    fixed2.push((j, j, 1e-4));
                }
                let kkt2 = assemble_kkt(&fixed2, &rho, n, m);
                ldl_numeric(&kkt2, &sym).map_err(|_| QpError::NotPsd)?
            }
        };

        let mut a_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
        for (i, j, v) in prob.a.iter_entries() {
            a_rows[i].push((j, v));
        }

        Ok(Self {
            prob,
            settings,
            n,
            m,
            d,
            e,
            c,
            qs,
            a_s,
            ls,
            us,
            eq_row,
            rho_base,
            rho,
            rho_inv,
            sigma,
            kkt_fixed,
            sym,
            factors,
            a_rows,
        })
    }

    /// Swaps the linear objective term; the factorization is reused.
    pub fn update_linear_term(&mut self, q: Vec<f64>) -> Result<(), QpError> {
        if q.len() != self.n {
            return Err(QpError::DimensionMismatch("q length"));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("q"));
        }
        for j in 0..self.n {
            self.qs[j] = self.c * q[j] * self.d[j];
        }
        self.prob.q = q;
        Ok(())
    }

    /// Swaps constraint bounds; rows may not change between equality and
    /// inequality so the penalty structure stays valid.
    pub fn update_bounds(&mut self, l: Vec<f64>, u: Vec<f64>) -> Result<(), QpError> {
        if l.len() != self.m || u.len() != self.m {
            return Err(QpError::DimensionMismatch("bounds length"));
        }
        for i in 0..self.m {
            if l[i].is_nan() || u[i].is_nan() {
                return Err(QpError::NonFinite("bounds"));
            }
            if l[i] > u[i] {
                return Err(QpError::BoundsInverted { row: i });
            }
            if (l[i] == u[i]) != self.eq_row[i] {
                return Err(QpError::EqualityPatternChanged { row: i });
            }
        }
        for i in 0..self.m {
            self.ls[i] = self.e[i] * l[i];
            self.us[i] = self.e[i] * u[i];
        }
        self.prob.l = l;
        self.prob.u = u;
        Ok(())
    }

    pub fn problem(&self) -> &QpProblem {
        &self.prob
    }

    fn set_rho(&mut self, new_base: f64) {
        self.rho_base = new_base;
        for i in 0..self.m {
            self.rho[i] = if self.eq_row[i] { new_base * RHO_EQ_SCALE } else { new_base };
            self.rho_inv[i] = 1.0 / self.rho[i];
        }
        let kkt = assemble_kkt(&self.kkt_fixed, &self.rho, self.n, self.m);
        if let Ok(f) = ldl_numeric(&kkt, &self.sym) {
            self.factors = f;
        }
        // On the (never observed) failure path the previous factors remain
        // in use; the iteration stays correct, only slower.
    }

    pub fn solve(&mut self, warm: Option<&WarmStart>) -> QpResult {
        let (n, m) = (self.n, self.m);
        let mut xbar = vec![0.0f64; n];
        let mut ybar = vec![0.0f64; m];
        let mut zbar = vec![0.0f64; m];
        if let Some(w) = warm {
            assert_eq!(w.x.len(), n, "warm start x length");
            assert_eq!(w.y.len(), m, "warm start y length");
            for j in 0..n {
                xbar[j] = w.x[j] / self.d[j];
            }
            for i in 0..m {
                ybar[i] = self.c * w.y[i] / self.e[i];
            }
            let mut ax = vec![0.0; m];
            self.a_s.mul_vec(&xbar, &mut ax);
            for i in 0..m {
                zbar[i] = ax[i].clamp(self.ls[i], self.us[i]);
            }
        }

        let alpha = self.settings.alpha;
        let check_every = self.settings.check_interval.max(1);
        let adapt_every = 4 * check_every;

        let mut rhs = vec![0.0f64; n + m];
        let mut x = vec![0.0f64; n];
        let mut y = vec![0.0f64; m];
        let mut z = vec![0.0f64; m];
        let mut ax = vec![0.0f64; m];
        let mut px = vec![0.0f64; n];
        let mut aty = vec![0.0f64; n];
        let mut prev_xbar = vec![0.0f64; n];
        let mut prev_ybar = vec![0.0f64; m];

        let mut polish_attempts = 0usize;
        let mut last_polish_iter = 0usize;
        let mut iterations = 0usize;
        let mut best = (f64::INFINITY, f64::INFINITY);
        let mut best_score = f64::INFINITY;
        let mut last_improve_iter = 0usize;

        for iter in 1..=self.settings.max_iter {
            iterations = iter;
            prev_xbar.copy_from_slice(&xbar);
            prev_ybar.copy_from_slice(&ybar);

            for j in 0..n {
                rhs[j] = self.sigma * xbar[j] - self.qs[j];
            }
            for i in 0..m {
                rhs[n + i] = zbar[i] - ybar[i] * self.rho_inv[i];
            }
            self.factors.solve_in_place(&mut rhs);

            for j in 0..n {
                xbar[j] = alpha * rhs[j] + (1.0 - alpha) * xbar[j];
            }
            for i in 0..m {
                let ztilde = zbar[i] + (rhs[n + i] - ybar[i]) * self.rho_inv[i];
                let zpre = alpha * ztilde + (1.0 - alpha) * zbar[i];
                let znew = (zpre + ybar[i] * self.rho_inv[i]).clamp(self.ls[i], self.us[i]);
                ybar[i] += self.rho[i] * (zpre - znew);
                zbar[i] = znew;
            }

            let last = iter == self.settings.max_iter;
            if iter % check_every != 0 && !last {
                continue;
            }

            // True residuals in original coordinates.
            for j in 0..n {
                x[j] = self.d[j] * xbar[j];
            }
            for i in 0..m {
                y[i] = self.e[i] * ybar[i] / self.c;
                z[i] = zbar[i] / self.e[i];
            }
            self.prob.a.mul_vec(&x, &mut ax);
            self.prob.p.mul_vec(&x, &mut px);
            self.prob.a.mul_transpose_vec(&y, &mut aty);
            let mut rp = 0.0f64;
            for i in 0..m {
                rp = rp.max(fmath::abs(ax[i] - z[i]));
            }
            let mut rd = 0.0f64;
            for j in 0..n {
                rd = rd.max(fmath::abs(px[j] + self.prob.q[j] + aty[j]));
            }
            best = (best.0.min(rp), best.1.min(rd));
            let eps_prim = self.settings.eps_abs
                + self.settings.eps_rel * inf_norm(&ax).max(inf_norm(&z));
            let eps_dual = self.settings.eps_abs
                + self.settings.eps_rel
                    * inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&self.prob.q));
            let score = rp / eps_prim + rd / eps_dual;
            if score <= 0.9 * best_score {
                best_score = score;
                last_improve_iter = iter;
            }

            if rp <= eps_prim && rd <= eps_dual {
                if self.settings.polish {
                    if let Some(res) = self.polish(&x, &y, 10.0 * eps_prim, iterations) {
                        return res;
                    }
                }
                return self.finish(x.clone(), y.clone(), QpStatus::Optimal, rp, rd, iterations, false);
            }

            // Rescue polish for stalled iterations. Attempting it while the
            // residuals are still falling would polish from a sloppy point:
            // the candidate could pass every tolerance yet sit on the wrong
            // end of a tie-break-flat face, and the objective comparison
            // inside cannot tell from a reference that is itself far off.
            // Degenerate dual splits, by contrast, plateau for thousands of
            // iterations and genuinely need the vertex solve.
            if self.settings.polish
                && polish_attempts < MAX_POLISH_ATTEMPTS
                && rp <= POLISH_TRIGGER * eps_prim
                && rd <= POLISH_TRIGGER * eps_dual
                && (iter - last_improve_iter) >= STALL_INTERVALS * check_every
                && (iter - last_polish_iter) >= 4 * check_every
            {
                polish_attempts += 1;
                last_polish_iter = iter;
                if let Some(res) = self.polish(&x, &y, 10.0 * eps_prim, iterations) {
                    return res;
                }
            }

            // Infeasibility certificates from one-step differences.
            if m > 0 {
                let dy: Vec<f64> =
                    (0..m).map(|i| self.e[i] * (ybar[i] - prev_ybar[i]) / self.c).collect();
                if let Some(cert) = self.primal_infeasibility(&dy) {
                    return QpResult {
                        x,
                        y,
                        objective: f64::NAN,
                        status: QpStatus::PrimalInfeasible,
                        prim_res: rp,
                        dual_res: rd,
                        iterations,
                        polished: false,
                        certificate: Some(cert),
                    };
                }
            }
            let dx: Vec<f64> = (0..n).map(|j| self.d[j] * (xbar[j] - prev_xbar[j])).collect();
            if let Some(cert) = self.dual_infeasibility(&dx) {
                return QpResult {
                    x,
                    y,
                    objective: f64::NAN,
                    status: QpStatus::DualInfeasible,
                    prim_res: rp,
                    dual_res: rd,
                    iterations,
                    polished: false,
                    certificate: Some(cert),
                };
            }

            if self.settings.adaptive_rho && iter % adapt_every == 0 && !last && m > 0 {
                let prim_scale = inf_norm(&ax).max(inf_norm(&z)).max(1e-12);
                let dual_scale =
                    inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&self.prob.q)).max(1e-12);
                let num = rp / prim_scale;
                let den = (rd / dual_scale).max(1e-16);
                let ratio = fmath::sqrt(num / den);
                let new_rho = (self.rho_base * ratio).clamp(RHO_MIN, RHO_MAX);
                if new_rho > 5.0 * self.rho_base || new_rho < self.rho_base / 5.0 {
                    self.set_rho(new_rho);
                }
            }
        }

        // Out of iterations: one last polish may still land the target.
        for j in 0..n {
            x[j] = self.d[j] * xbar[j];
        }
        for i in 0..m {
            y[i] = self.e[i] * ybar[i] / self.c;
        }
        if self.settings.polish {
            self.prob.a.mul_vec(&x, &mut ax);
            let eps_prim = self.settings.eps_abs + self.settings.eps_rel * inf_norm(&ax);
            if let Some(res) = self.polish(&x, &y, 10.0 * eps_prim, iterations) {
                return res;
            }
        }
        self.finish(x, y, QpStatus::MaxIterations, best.0, best.1, iterations, false)
    }

    fn finish(
        &self,
        x: Vec<f64>,
        y: Vec<f64>,
        status: QpStatus,
        rp: f64,
        rd: f64,
        iterations: usize,
        polished: bool,
    ) -> QpResult {
        let objective = self.prob.objective(&x);
        QpResult {
            x,
            y,
            objective,
            status,
            prim_res: rp,
            dual_res: rd,
            iterations,
            polished,
            certificate: None,
        }
    }

    /// Solves the KKT system restricted to the active set read off the
    /// duals, with static regularization plus iterative refinement, and
    /// accepts the candidate only if it meets the full tolerances.
    ///
    /// The set is seeded from dual signs and widened by primal proximity
    /// (weakly active rows hide their multipliers under degeneracy); pins
    /// whose computed multiplier then carries the wrong sign are dropped
    /// and the reduced system is solved once more.
    fn polish(&self, x: &[f64], y: &[f64], prox: f64, iterations: usize) -> Option<QpResult> {
        let (n, m) = (self.n, self.m);
        // Absolute dual threshold: the iteration drives multipliers of
        // strictly inactive rows to exact zero, while weakly active rows can
        // carry legitimately tiny multipliers (set by objective tie-break
        // terms), so a floor relative to the largest dual would miss them.
        // A spurious pin slipping through is repaired by the consistency
        // pass below.
        let thr = 1e-9;
        let mut ax0 = vec![0.0f64; m];
        self.prob.a.mul_vec(x, &mut ax0);
        let mut active: Vec<(usize, f64)> = Vec::new(); // (row, pinned bound)
        for i in 0..m {
            let (l, u) = (self.prob.l[i], self.prob.u[i]);
            if self.eq_row[i] {
                active.push((i, l));
            } else if y[i] < -thr {
                active.push((i, l));
            } else if y[i] > thr {
                active.push((i, u));
            } else {
                let dl = if l.is_finite() { ax0[i] - l } else { f64::INFINITY };
                let du = if u.is_finite() { u - ax0[i] } else { f64::INFINITY };
                if dl <= prox || du <= prox {
                    active.push((i, if dl <= du { l } else { u }));
                }
            }
        }

        // Elimination takes the pins in order, so inside a linearly
        // dependent family it is the members appearing last whose pivots
        // collapse and get pruned below. Order by dual magnitude: the
        // iteration's own multipliers say which rows truly carry force,
        // shedding redundancy from the weakest (proximity-seeded) members.
        active.sort_by(|a, b| {
            let (ea, eb) = (self.eq_row[a.0], self.eq_row[b.0]);
            eb.cmp(&ea).then_with(|| {
                fmath::abs(y[b.0])
                    .partial_cmp(&fmath::abs(y[a.0]))
                    .unwrap_or(core::cmp::Ordering::Equal)
            })
        });

        let mut pinned = vec![false; m];
        for &(row, _) in &active {
            pinned[row] = true;
        }
        // Pins removed twice stay out (or, when wrong-signed, stay in) for
        // good; this breaks add/drop cycles at degenerate vertices.
        let mut strikes = vec![0u8; m];

        let p_scale = self.prob.p.max_abs().max(self.prob.a.max_abs()).max(1.0);
        let delta_x = 1e-9 * p_scale;
        // The dual-block shift must dominate the roundoff of the Schur
        // complement entries, which reach 1/delta_x when a pinned row
        // touches a curvature-free column; anything smaller is absorbed
        // by ulp(1/delta_x) and duplicate pins then cancel to an exact
        // zero pivot.
        let delta_dual = 1e-6 * p_scale;

        let solve_pinned = |active: &mut Vec<(usize, f64)>,
                            pinned: &mut [bool],
                            strikes: &mut [u8]|
         -> Option<(Vec<f64>, f64, LdlFactors)> {
            // Factor, shedding pins linearly dependent on their
            // predecessors: such a row adds no information, its dual pivot
            // collapses onto the bare regularization shift (independent
            // rows land orders of magnitude further out), and the
            // multiplier split across the family would be arbitrary, which
            // makes every sign test downstream meaningless.
            let fac = loop {
                let k = active.len();
                let dim = n + k;
                let mut trip: Vec<(usize, usize, f64)> = Vec::new();
                for (i, j, v) in self.prob.p.iter_entries() {
                    if i <= j {
                        trip.push((i, j, v));
                    }
                }
                for j in 0..n {
                    trip.push((j, j, delta_x));
                }
                for (t, &(row, _)) in active.iter().enumerate() {
                    for &(col, v) in &self.a_rows[row] {
                        trip.push((col, n + t, v));
                    }
                    trip.push((n + t, n + t, -delta_dual));
                }
                let kkt = SparseMatrix::from_triplets(dim, dim, &trip);
                let sym = ldl_symbolic(&kkt);
                let fac = ldl_numeric(&kkt, &sym).ok()?;
                let d = fac.diag();
                let dep: Vec<usize> = (0..k)
                    .filter(|&t| fmath::abs(d[n + t]) <= 10.0 * delta_dual)
                    .collect();
                if dep.is_empty() {
                    break fac;
                }
                for &t in dep.iter().rev() {
                    let (row, _) = active.remove(t);
                    pinned[row] = false;
                    strikes[row] = strikes[row].saturating_add(1);
                }
            };
            let k = active.len();
            let dim = n + k;

            let mut sol = vec![0.0f64; dim];
            for j in 0..n {
                sol[j] = -self.prob.q[j];
            }
            for (t, &(_, b)) in active.iter().enumerate() {
                sol[n + t] = b;
            }
            fac.solve_in_place(&mut sol);

            // Refinement against the unregularized system; run until the
            // residual bottoms out so the regularization cannot leak into
            // the answer regardless of the objective's magnitude.
            let rhs_scale = 1.0
                + inf_norm(&self.prob.q)
                + active.iter().fold(0.0f64, |a, &(_, b)| a.max(fmath::abs(b)));
            let mut resid = vec![0.0f64; dim];
            let mut px = vec![0.0f64; n];
            let mut prev_norm = f64::INFINITY;
            let mut best = sol.clone();
            let mut best_norm = f64::INFINITY;
            let mut best_pin = f64::INFINITY;
            for _ in 0..10 {
                let (xs, ys) = sol.split_at(n);
                self.prob.p.mul_vec(xs, &mut px);
                for j in 0..n {
                    resid[j] = -(px[j] + self.prob.q[j]);
                }
                for (t, &(row, b)) in active.iter().enumerate() {
                    let mut ax = 0.0;
                    for &(col, v) in &self.a_rows[row] {
                        ax += v * xs[col];
                        resid[col] -= v * ys[t];
                    }
                    resid[n + t] = b - ax;
                }
                let rn = inf_norm(&resid);
                // Refinement can diverge along nearly-flat directions the
                // regularization perturbs; always hand back the iterate
                // with the smallest measured residual.
                if rn < best_norm {
                    best_norm = rn;
                    best_pin = inf_norm(&resid[n..]);
                    best.copy_from_slice(&sol);
                }
                if rn <= 1e-15 * rhs_scale || rn >= 0.5 * prev_norm {
                    break;
                }
                prev_norm = rn;
                fac.solve_in_place(&mut resid);
                for j in 0..dim {
                    sol[j] += resid[j];
                }
            }
            // The second component reports how far the best iterate is from
            // actually sitting on its pins: a consistent set refines to
            // roundoff, a contradictory one stalls at the gap size. The
            // factors ride along for exchange steps.
            Some((best, best_pin, fac))
        };

        let (mut sol, mut pin_res, mut fac) = solve_pinned(&mut active, &mut pinned, &mut strikes)?;

        // Alternating add/drop rounds until the set is stable. The seeds
        // miss rows whose multipliers have not separated from zero and
        // over-pin near-active rows, so a single pass in either direction
        // is not enough: dropping a wrong-signed pin moves the solution,
        // which can expose fresh violations, and vice versa.
        let vtol = self.settings.eps_abs.max(1e-12);
        let mut ax = vec![0.0f64; m];
        for _round in 0..60 {
            // Contradictory pins first: no x satisfies them all (or only an
            // enormous excursion along a nearly dependent direction does),
            // so the clashing pins lean on the dual regularization and
            // their multipliers blow up together. The freshly added pin
            // always carries the largest one, which says nothing about who
            // is wrong; evict the clique member with the weakest support in
            // the iteration's own duals instead.
            let bscale = active.iter().fold(1.0f64, |a, &(_, b)| a.max(fmath::abs(b)));
            if pin_res > 1e-6 * bscale {
                let mmax = active
                    .iter()
                    .enumerate()
                    .filter(|&(_, &(row, _))| !self.eq_row[row])
                    .fold(0.0f64, |a, (t, _)| a.max(fmath::abs(sol[n + t])));
                let mut evict: Option<(f64, usize)> = None; // (|admm dual|, index in active)
                for (t, &(row, _)) in active.iter().enumerate() {
                    if self.eq_row[row] || fmath::abs(sol[n + t]) < 0.1 * mmax {
                        continue;
                    }
                    let a = fmath::abs(y[row]);
                    if evict.map_or(true, |(w, _)| a < w) {
                        evict = Some((a, t));
                    }
                }
                let Some((_supp, t_drop)) = evict else {
                    return None; // only equality rows left yet still inconsistent
                };
                let row = active[t_drop].0;
                strikes[row] = strikes[row].saturating_add(1);
                pinned[row] = false;
                active.remove(t_drop);
                (sol, pin_res, fac) = solve_pinned(&mut active, &mut pinned, &mut strikes)?;
                continue;
            }

            self.prob.a.mul_vec(&sol[..n], &mut ax);
            let mut cand: Vec<(f64, usize, f64)> = Vec::new();
            for i in 0..m {
                if pinned[i] || strikes[i] >= 2 {
                    continue;
                }
                if ax[i] < self.prob.l[i] - vtol {
                    cand.push((self.prob.l[i] - ax[i], i, self.prob.l[i]));
                } else if ax[i] > self.prob.u[i] + vtol {
                    cand.push((ax[i] - self.prob.u[i], i, self.prob.u[i]));
                }
            }
            if !cand.is_empty() {
                cand.sort_unstable_by(|a, b| {
                    b.0.partial_cmp(&a.0).unwrap_or(core::cmp::Ordering::Equal)
                });
                // A violated row the factor already pruned once sits in the
                // span of the current pins, so adding it back is useless on
                // its own: it needs an exchange. Expand its normal in terms
                // of the pins (the dual part of K^-1 [a_r; 0]) and evict the
                // pin carrying the largest weight, the one whose release
                // moves the violated row fastest.
                if let Some(&(_, r, b)) = cand.iter().find(|&&(_, i, _)| strikes[i] == 1) {
                    let k = active.len();
                    let mut rhs = vec![0.0f64; n + k];
                    for &(col, v) in &self.a_rows[r] {
                        rhs[col] = v;
                    }
                    fac.solve_in_place(&mut rhs);
                    // Cumulative-energy chains give whole families the same
                    // weight; break ties toward the pin with the weakest
                    // support in the iteration's duals.
                    let wmax = active
                        .iter()
                        .enumerate()
                        .filter(|&(_, &(row, _))| !self.eq_row[row])
                        .fold(0.0f64, |a, (t, _)| a.max(fmath::abs(rhs[n + t])));
                    let mut leave: Option<(f64, usize)> = None; // (|admm dual|, idx)
                    for (t, &(row, _)) in active.iter().enumerate() {
                        if self.eq_row[row] || fmath::abs(rhs[n + t]) < 0.5 * wmax {
                            continue;
                        }
                        let supp = fmath::abs(y[row]);
                        if leave.map_or(true, |(best, _)| supp < best) {
                            leave = Some((supp, t));
                        }
                    }
                    let Some((_w, t_leave)) = leave else {
                        return None;
                    };
                    let out = active[t_leave].0;
                    strikes[out] = strikes[out].saturating_add(1);
                    pinned[out] = false;
                    active.remove(t_leave);
                    active.push((r, b));
                    pinned[r] = true;
                } else {
                    // A single runaway column can violate several coupled
                    // rows at once, and pinning them all would
                    // over-determine the system; admit at most one new pin
                    // per column, worst first.
                    let mut col_taken = vec![false; n];
                    for &(_, i, b) in &cand {
                        if self.a_rows[i].iter().any(|&(col, _)| col_taken[col]) {
                            continue;
                        }
                        for &(col, _) in &self.a_rows[i] {
                            col_taken[col] = true;
                        }
                        active.push((i, b));
                        pinned[i] = true;
                    }
                }
                (sol, pin_res, fac) = solve_pinned(&mut active, &mut pinned, &mut strikes)?;
                continue;
            }

            // Drop at most the worst wrong-signed pin per round. Redundant
            // pins carry an arbitrary split of their group's aggregate
            // multiplier, so several can look wrong-signed at once while
            // the group itself is needed; removing one member at a time
            // lets the survivors re-absorb the aggregate before judging
            // the rest. The tolerance must stay near the refinement noise
            // floor: a vertex losing only by tie-break curvature announces
            // itself through multipliers a few orders above that floor but
            // far below every price-scale quantity.
            let ytol = {
                let ynorm = sol[n..].iter().fold(0.0f64, |a, &v| a.max(fmath::abs(v)));
                1e-8 * (1.0 + 1e-4 * ynorm)
            };
            let mut worst: Option<(f64, usize)> = None; // (violation, index in active)
            for (t, &(row, b)) in active.iter().enumerate() {
                if self.eq_row[row] || strikes[row] >= 2 {
                    continue;
                }
                let mult = sol[n + t];
                let at_lower = b == self.prob.l[row];
                // A lower pin must not push upward, an upper pin not downward.
                let bad = if at_lower { mult - ytol } else { -mult - ytol };
                if bad > 0.0 && worst.map_or(true, |(w, _)| bad > w) {
                    worst = Some((bad, t));
                }
            }
            let Some((_, t_drop)) = worst else {
                break;
            };
            // Releasing the pin frees one direction; march it explicitly.
            // The factor gives the direction x takes per unit of bound
            // movement, a ratio test finds the first row to block, and the
            // objective's own curvature along the direction says where the
            // descent bottoms out. Whichever comes first decides: a blocking
            // row swaps in as the replacement pin (one simplex step), while
            // an interior minimum means the pin simply leaves and the next
            // solve settles there.
            let row = active[t_drop].0;
            let at_lower = active[t_drop].1 == self.prob.l[row];
            let dir = if at_lower { 1.0 } else { -1.0 };
            let k = active.len();
            let mut dx = vec![0.0f64; n + k];
            dx[n + t_drop] = dir;
            fac.solve_in_place(&mut dx);
            let rate_tol = 1e-10 * (1.0 + inf_norm(&dx[..n]));
            let mut hit: Option<(f64, usize, f64)> = None; // (theta, row, bound)
            // The released row's own far bound blocks too.
            let far = if at_lower { self.prob.u[row] } else { self.prob.l[row] };
            if far.is_finite() {
                hit = Some((fmath::abs(far - ax[row]), row, far));
            }
            for i in 0..m {
                if pinned[i] {
                    continue;
                }
                let mut rate = 0.0;
                for &(col, v) in &self.a_rows[i] {
                    rate += v * dx[col];
                }
                let (theta, b) = if rate > rate_tol && self.prob.u[i].is_finite() {
                    ((self.prob.u[i] - ax[i]) / rate, self.prob.u[i])
                } else if rate < -rate_tol && self.prob.l[i].is_finite() {
                    ((self.prob.l[i] - ax[i]) / rate, self.prob.l[i])
                } else {
                    continue;
                };
                let theta = theta.max(0.0);
                if hit.map_or(true, |(t, _, _)| theta < t) {
                    hit = Some((theta, i, b));
                }
            }
            let theta_obj = {
                let xs = &sol[..n];
                let mut pxv = vec![0.0f64; n];
                self.prob.p.mul_vec(xs, &mut pxv);
                let mut gd = 0.0;
                for j in 0..n {
                    gd += (pxv[j] + self.prob.q[j]) * dx[j];
                }
                let mut pd = vec![0.0f64; n];
                self.prob.p.mul_vec(&dx[..n], &mut pd);
                let mut curv = 0.0;
                for j in 0..n {
                    curv += dx[j] * pd[j];
                }
                if curv > 0.0 {
                    (-gd / curv).max(0.0)
                } else {
                    f64::INFINITY
                }
            };
            strikes[row] += 1;
            match hit {
                Some((theta, blk, blk_b)) if theta <= theta_obj => {
                    if blk == row {
                        // Runs into its own far bound first.
                        active[t_drop].1 = blk_b;
                    } else {
                        pinned[row] = false;
                        active.remove(t_drop);
                        active.push((blk, blk_b));
                        pinned[blk] = true;
                    }
                }
                _ if theta_obj.is_finite() => {
                    pinned[row] = false;
                    active.remove(t_drop);
                }
                // Nothing blocks and no curvature: the release would be
                // unbounded, which contradicts the iteration having
                // converged to a finite point.
                _ => return None,
            }
            (sol, pin_res, fac) = solve_pinned(&mut active, &mut pinned, &mut strikes)?;
        }

        // A stable set can still be the wrong vertex: any consistent
        // full-row-rank pin set zeroes both residuals, so the tolerance
        // check below cannot tell optimal from merely feasible. The
        // multiplier signs are the missing certificate, and pins kept only
        // because they went sticky may carry bad ones; reject rather than
        // return a feasible but suboptimal point.
        {
            let ytol = {
                let ynorm = sol[n..].iter().fold(0.0f64, |a, &v| a.max(fmath::abs(v)));
                1e-8 * (1.0 + 1e-4 * ynorm)
            };
            for (t, &(row, b)) in active.iter().enumerate() {
                if self.eq_row[row] {
                    continue;
                }
                let mult = sol[n + t];
                let bad = if b == self.prob.l[row] { mult } else { -mult };
                if bad > ytol {
                    return None;
                }
            }
        }

        let x_hat = sol[..n].to_vec();
        let mut y_hat = vec![0.0f64; m];
        for (t, &(row, _)) in active.iter().enumerate() {
            y_hat[row] = sol[n + t];
        }

        let mut px = vec![0.0f64; n];
        let mut ax = vec![0.0f64; m];
        let mut aty = vec![0.0f64; n];
        self.prob.a.mul_vec(&x_hat, &mut ax);
        self.prob.p.mul_vec(&x_hat, &mut px);
        self.prob.a.mul_transpose_vec(&y_hat, &mut aty);
        let mut rp = 0.0f64;
        let mut z_norm = 0.0f64;
        for i in 0..m {
            let zi = ax[i].clamp(self.prob.l[i], self.prob.u[i]);
            rp = rp.max(fmath::abs(ax[i] - zi));
            z_norm = z_norm.max(fmath::abs(zi));
        }
        let mut rd = 0.0f64;
        for j in 0..n {
            rd = rd.max(fmath::abs(px[j] + self.prob.q[j] + aty[j]));
        }
        let eps_prim = self.settings.eps_abs + self.settings.eps_rel * inf_norm(&ax).max(z_norm);
        let eps_dual = self.settings.eps_abs
            + self.settings.eps_rel
                * inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&self.prob.q));
        if rp <= eps_prim && rd <= eps_dual {
            Some(self.finish(x_hat, y_hat, QpStatus::Optimal, rp, rd, iterations, true))
        } else {
            None
        }
    }

    fn primal_infeasibility(&self, dy: &[f64]) -> Option<Vec<f64>> {
        let ny = inf_norm(dy);
        if ny <= 1e-12 {
            return None;
        }
        let mut atdy = vec![0.0f64; self.n];
        self.prob.a.mul_transpose_vec(dy, &mut atdy);
        if inf_norm(&atdy) > EPS_INFEASIBLE * ny {
            return None;
        }
        let mut support = 0.0f64;
        for i in 0..self.m {
            let dp = dy[i].max(0.0);
            let dm = dy[i].min(0.0);
            if self.prob.u[i].is_infinite() {
                if dp > EPS_INFEASIBLE * ny {
                    return None;
                }
            } else {
                support += self.prob.u[i] * dp;
            }
            if self.prob.l[i].is_infinite() {
                if dm < -EPS_INFEASIBLE * ny {
                    return None;
                }
            } else {
                support += self.prob.l[i] * dm;
            }
        }
        if support <= -EPS_INFEASIBLE * ny {
            Some(dy.to_vec())
        } else {
            None
        }
    }

    fn dual_infeasibility(&self, dx: &[f64]) -> Option<Vec<f64>> {
        let nx = inf_norm(dx);
        if nx <= 1e-12 {
            return None;
        }
        let mut pdx = vec![0.0f64; self.n];
        self.prob.p.mul_vec(dx, &mut pdx);
        if inf_norm(&pdx) > EPS_INFEASIBLE * nx {
            return None;
        }
        if dot(&self.prob.q, dx) > -EPS_INFEASIBLE * nx {
            return None;
        }
        let mut adx = vec![0.0f64; self.m];
        self.prob.a.mul_vec(dx, &mut adx);
        for i in 0..self.m {
            let tol = EPS_INFEASIBLE * nx;
            if self.prob.u[i].is_finite() && adx[i] > tol {
                return None;
            }
            if self.prob.l[i].is_finite() && adx[i] < -tol {
                return None;
            }
        }
        Some(dx.to_vec())
    }
}

fn assemble_kkt(
    fixed: &[(usize, usize, f64)],
    rho: &[f64],
    n: usize,
    m: usize,
) -> SparseMatrix {
    let mut trip = Vec::with_capacity(fixed.len() + m);
    trip.extend_from_slice(fixed);
    for i in 0..m {
        trip.push((n + i, n + i, -1.0 / rho[i]));
    }
    SparseMatrix::from_triplets(n + m, n + m, &trip)
}
