//! Independent dense fallback: a Mehrotra predictor-corrector interior
//! point method. Shares no machinery with the ADMM path (dense LU instead
//! of sparse LDL', barrier instead of splitting), which is what makes it a
//! meaningful cross-check oracle for small problems.

use alloc::vec;
use alloc::vec::Vec;

use super::{QpError, QpProblem, QpResult, QpStatus};
use crate::fmath;
use crate::linalg::{dot, inf_norm, lu_solve_in_place, DenseMatrix};

/// Practical size cap; the oracle is dense and cubic per iteration.
const MAX_DENSE_VARS: usize = 400;
const MAX_ITER: usize = 200;
const STEP_FRACTION: f64 = 0.995;

/// Solves the QP with the dense interior-point method. Intended for
/// problems with at most a few hundred variables; primarily a test oracle.
pub fn solve_qp_dense(problem: &QpProblem) -> Result<QpResult, QpError> {
    let n = problem.num_vars();
    let m = problem.num_constraints();
    if n > MAX_DENSE_VARS {
        return Err(QpError::DimensionMismatch("dense fallback capped at 400 variables"));
    }

    // Split two-sided rows into equalities and one-sided inequalities.
    // Each inequality remembers the original row and sign for dual mapping.
    let mut eq_rows: Vec<usize> = Vec::new();
    let mut ineq: Vec<(usize, f64, f64)> = Vec::new(); // (row, sign, bound)
    for i in 0..m {
        let (l, u) = (problem.l[i], problem.u[i]);
        if l == u {
            eq_rows.push(i);
        } else {
            if u.is_finite() {
                ineq.push((i, 1.0, u));
            }
            if l.is_finite() {
                ineq.push((i, -1.0, -l));
            }
        }
    }
    let me = eq_rows.len();
    let mi = ineq.len();

    let a_dense = problem.a.to_dense();
    let p_dense = problem.p.to_dense();
    let e_mat = {
        let mut e = DenseMatrix::zeros(me, n);
        for (r, &row) in eq_rows.iter().enumerate() {
            for j in 0..n {
                e.set(r, j, a_dense.get(row, j));
            }
        }
        e
    };
    let b_e: Vec<f64> = eq_rows.iter().map(|&row| problem.l[row]).collect();
    let c_mat = {
        let mut c = DenseMatrix::zeros(mi, n);
        for (r, &(row, sign, _)) in ineq.iter().enumerate() {
            for j in 0..n {
                c.set(r, j, sign * a_dense.get(row, j));
            }
        }
        c
    };
    let d_i: Vec<f64> = ineq.iter().map(|&(_, _, bound)| bound).collect();

    let scale = 1.0
        + inf_norm(&problem.q).max(inf_norm(&b_e)).max(inf_norm(&d_i)).max(p_dense.frobenius_norm());
    let delta = 1e-11 * scale;

    let mut x = vec![0.0f64; n];
    let mut y = vec![0.0f64; me];
    let mut s: Vec<f64> = d_i.iter().map(|&d| d.max(1.0)).collect();
    let mut lam = vec![1.0f64; mi];

    let mut cx = vec![0.0f64; mi];
    let mut ex = vec![0.0f64; me];
    let mut px = vec![0.0f64; n];
    let mut ety = vec![0.0f64; n];
    let mut ctl = vec![0.0f64; n];

    let mut converged = false;
    let mut iters_used = 0usize;
    for iter in 0..MAX_ITER {
        iters_used = iter + 1;
        p_dense.mul_vec(&x, &mut px);
        if me > 0 {
            e_mat.mul_vec(&x, &mut ex);
            e_mat.transpose().mul_vec(&y, &mut ety);
        }
        if mi > 0 {
            c_mat.mul_vec(&x, &mut cx);
            c_mat.transpose().mul_vec(&lam, &mut ctl);
        }
        let rd: Vec<f64> = (0..n)
            .map(|j| px[j] + problem.q[j] + if me > 0 { ety[j] } else { 0.0 } + if mi > 0 { ctl[j] } else { 0.0 })
            .collect();
        let rp: Vec<f64> = (0..me).map(|r| ex[r] - b_e[r]).collect();
        let ri: Vec<f64> = (0..mi).map(|r| cx[r] + s[r] - d_i[r]).collect();
        let mu = if mi > 0 { dot(&s, &lam) / mi as f64 } else { 0.0 };

        let worst = inf_norm(&rd).max(inf_norm(&rp)).max(inf_norm(&ri));
        if worst <= 1e-10 * scale && mu <= 1e-11 * scale {
            converged = true;
            break;
        }

        // Condensed Newton matrix, shared by predictor and corrector.
        let dim = n + me;
        let mut msys = DenseMatrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                msys.set(i, j, p_dense.get(i, j));
            }
            msys.add_to(i, i, delta);
        }
        for r in 0..mi {
            let w = lam[r] / s[r];
            for i in 0..n {
                let cri = c_mat.get(r, i);
                if cri == 0.0 {
                    continue;
                }
                for j in 0..n {
                    msys.add_to(i, j, w * cri * c_mat.get(r, j));
                }
            }
        }
        for r in 0..me {
            for j in 0..n {
                let v = e_mat.get(r, j);
                msys.set(n + r, j, v);
                msys.set(j, n + r, v);
            }
            msys.set(n + r, n + r, -delta);
        }

        let solve_direction = |msys: &DenseMatrix, r_c: &[f64]| -> Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
            let mut rhs = vec![0.0f64; dim];
            for j in 0..n {
                let mut acc = -rd[j];
                for r in 0..mi {
                    acc += c_mat.get(r, j) * (r_c[r] - lam[r] * ri[r]) / s[r];
                }
                rhs[j] = acc;
            }
            for r in 0..me {
                rhs[n + r] = -rp[r];
            }
            let mut lu = msys.clone();
            lu_solve_in_place(&mut lu, &mut rhs).ok()?;
            let dx = rhs[..n].to_vec();
            let dy = rhs[n..].to_vec();
            let mut ds = vec![0.0f64; mi];
            let mut dlam = vec![0.0f64; mi];
            for r in 0..mi {
                let mut cdx = 0.0;
                for j in 0..n {
                    cdx += c_mat.get(r, j) * dx[j];
                }
                ds[r] = -ri[r] - cdx;
                dlam[r] = -(r_c[r] + lam[r] * ds[r]) / s[r];
            }
            Some((dx, dy, ds, dlam))
        };

        // Predictor.
        let r_c_aff: Vec<f64> = (0..mi).map(|r| s[r] * lam[r]).collect();
        let Some((dx_a, _dy_a, ds_a, dlam_a)) = solve_direction(&msys, &r_c_aff) else {
            break;
        };
        let step = |v: &[f64], dv: &[f64]| -> f64 {
            let mut a = 1.0f64;
            for (vi, dvi) in v.iter().zip(dv.iter()) {
                if *dvi < 0.0 {
                    a = a.min(-vi / dvi);
                }
            }
            a
        };
        let (dx, dy, ds, dlam) = if mi > 0 {
            let a_aff = step(&s, &ds_a).min(step(&lam, &dlam_a));
            let mut mu_aff = 0.0;
            for r in 0..mi {
                mu_aff += (s[r] + a_aff * ds_a[r]) * (lam[r] + a_aff * dlam_a[r]);
            }
            mu_aff /= mi as f64;
            let sigma = if mu > 0.0 {
                let r = (mu_aff / mu).clamp(0.0, 1.0);
                r * r * r
            } else {
                0.0
            };
            let r_c: Vec<f64> = (0..mi)
                .map(|r| s[r] * lam[r] + ds_a[r] * dlam_a[r] - sigma * mu)
                .collect();
            let Some(dir) = solve_direction(&msys, &r_c) else {
                break;
            };
            dir
        } else {
            (dx_a, _dy_a, ds_a, dlam_a)
        };

        let (ap, ad) = if mi > 0 {
            (
                (STEP_FRACTION * step(&s, &ds)).min(1.0),
                (STEP_FRACTION * step(&lam, &dlam)).min(1.0),
            )
        } else {
            (1.0, 1.0)
        };
        for j in 0..n {
            x[j] += ap * dx[j];
        }
        for r in 0..me {
            y[r] += ad * dy[r];
        }
        for r in 0..mi {
            s[r] += ap * ds[r];
            lam[r] += ad * dlam[r];
        }
        if mi == 0 && me == 0 {
            // Pure unconstrained Newton step lands in one iteration.
            converged = true;
            break;
        }
        if ap < 1e-12 && ad < 1e-12 {
            break;
        }
    }

    // Map duals back onto the original two-sided rows.
    let mut y_full = vec![0.0f64; m];
    for (r, &row) in eq_rows.iter().enumerate() {
        y_full[row] = y[r];
    }
    for (r, &(row, sign, _)) in ineq.iter().enumerate() {
        y_full[row] += sign * lam[r];
    }

    let mut ax = vec![0.0f64; m];
    problem.a.mul_vec(&x, &mut ax);
    let mut rp_final = 0.0f64;
    for i in 0..m {
        let z = ax[i].clamp(problem.l[i], problem.u[i]);
        rp_final = rp_final.max(fmath::abs(ax[i] - z));
    }
    let mut aty = vec![0.0f64; n];
    problem.a.mul_transpose_vec(&y_full, &mut aty);
    problem.p.mul_vec(&x, &mut px);
    let mut rd_final = 0.0f64;
    for j in 0..n {
        rd_final = rd_final.max(fmath::abs(px[j] + problem.q[j] + aty[j]));
    }

    let objective = problem.objective(&x);
    Ok(QpResult {
        x,
        y: y_full,
        objective,
        status: if converged { QpStatus::Optimal } else { QpStatus::MaxIterations },
        prim_res: rp_final,
        dual_res: rd_final,
        iterations: iters_used,
        polished: false,
        certificate: None,
    })
}
