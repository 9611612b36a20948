use alloc::vec;
use alloc::vec::Vec;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sparse::SparseMatrix;
use super::{solve_qp, solve_qp_dense, QpError, QpProblem, QpResult, QpSettings, QpSolver, QpStatus, WarmStart};

fn sparse_from_dense(rows: &[Vec<f64>]) -> SparseMatrix {
    let nrows = rows.len();
    let ncols = if nrows == 0 { 0 } else { rows[0].len() };
    let mut trips = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v != 0.0 {
                trips.push((i, j, v));
            }
        }
    }
    SparseMatrix::from_triplets(nrows, ncols, &trips)
}

fn solve_default(problem: &QpProblem) -> QpResult {
    solve_qp(problem, &QpSettings::default(), None).expect("solver setup")
}

/// Random strictly convex QP with bounds straddling a known feasible point,
/// so both solver routes must agree on the optimum.
fn random_qp(n: usize, m: usize, eq_rows: usize, rng: &mut ChaCha8Rng) -> QpProblem {
    let mut mfac = vec![vec![0.0f64; n]; n];
    for row in mfac.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let mut p = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += mfac[k][i] * mfac[k][j];
            }
            p[i][j] = acc;
        }
        p[i][i] += 0.5;
    }
    let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut a = vec![vec![0.0f64; n]; m];
    for row in a.iter_mut() {
        for v in row.iter_mut() {
            if rng.gen_bool(0.7) {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
    }
    let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut l = vec![0.0f64; m];
    let mut u = vec![0.0f64; m];
    for i in 0..m {
        let ax: f64 = (0..n).map(|j| a[i][j] * x0[j]).sum();
        if i < eq_rows {
            l[i] = ax;
            u[i] = ax;
        } else {
            l[i] = ax - rng.gen_range(0.01..1.5);
            u[i] = ax + rng.gen_range(0.01..1.5);
        }
    }
    QpProblem::new(sparse_from_dense(&p), q, sparse_from_dense(&a), l, u).expect("valid qp")
}

#[test]
fn scalar_quadratic_analytic() {
    // min 1/2 x^2 - x over a wide box: x* = 1, objective -1/2.
    let p = sparse_from_dense(&[vec![1.0]]);
    let a = sparse_from_dense(&[vec![1.0]]);
    let prob = QpProblem::new(p, vec![-1.0], a, vec![-1e6], vec![1e6]).unwrap();
    let res = solve_default(&prob);
    assert_eq!(res.status, QpStatus::Optimal);
    assert_abs_diff_eq!(res.x[0], 1.0, epsilon = 1e-8);
    assert_abs_diff_eq!(res.objective, -0.5, epsilon = 1e-8);
    assert!(res.polished, "well-conditioned QP should polish cleanly");
}

#[test]
fn box_lp_active_lower_bound() {
    // min x over 0 <= x <= 1: optimum pinned at the lower bound with y < 0.
    let p = sparse_from_dense(&[vec![0.0]]);
    let a = sparse_from_dense(&[vec![1.0]]);
    let prob = QpProblem::new(p, vec![1.0], a, vec![0.0], vec![1.0]).unwrap();
    let res = solve_default(&prob);
    assert_eq!(res.status, QpStatus::Optimal);
    assert_abs_diff_eq!(res.x[0], 0.0, epsilon = 1e-8);
    assert_abs_diff_eq!(res.y[0], -1.0, epsilon = 1e-6);
}

#[test]
fn equality_constrained_matches_lagrange_solution() {
    // min 1/2 (x0^2 + x1^2) s.t. x0 + x1 = 2 -> x = (1, 1), y = -1.
    let p = sparse_from_dense(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let a = sparse_from_dense(&[vec![1.0, 1.0]]);
    let prob = QpProblem::new(p, vec![0.0, 0.0], a, vec![2.0], vec![2.0]).unwrap();
    let res = solve_default(&prob);
    assert_eq!(res.status, QpStatus::Optimal);
    assert_abs_diff_eq!(res.x[0], 1.0, epsilon = 1e-8);
    assert_abs_diff_eq!(res.x[1], 1.0, epsilon = 1e-8);
    assert_abs_diff_eq!(res.y[0], -1.0, epsilon = 1e-6);
}

#[test]
fn dense_oracle_agrees_on_analytic_problem() {
    let p = sparse_from_dense(&[vec![2.0, 0.5], vec![0.5, 1.0]]);
    let a = sparse_from_dense(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
    let prob = QpProblem::new(
        p,
        vec![-1.0, 1.0],
        a,
        vec![-0.5, -0.5, -2.0],
        vec![2.0, 2.0, 1.0],
    )
    .unwrap();
    let admm = solve_default(&prob);
    let ipm = solve_qp_dense(&prob).unwrap();
    assert_eq!(admm.status, QpStatus::Optimal);
    assert_eq!(ipm.status, QpStatus::Optimal);
    assert_abs_diff_eq!(admm.objective, ipm.objective, epsilon = 1e-7);
    for j in 0..2 {
        assert_abs_diff_eq!(admm.x[j], ipm.x[j], epsilon = 1e-6);
    }
}

#[test]
fn random_instances_cross_check_between_routes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_01);
    for case in 0..25 {
        let n = rng.gen_range(2..9);
        let m = rng.gen_range(1..13);
        let eq = if m >= 2 { rng.gen_range(0..m.min(n)) } else { 0 };
        let prob = random_qp(n, m, eq, &mut rng);
        let admm = solve_default(&prob);
        let ipm = solve_qp_dense(&prob).unwrap();
        assert_eq!(admm.status, QpStatus::Optimal, "admm case {case}");
        assert_eq!(ipm.status, QpStatus::Optimal, "ipm case {case}");
        let scale = 1.0 + admm.objective.abs().max(ipm.objective.abs());
        assert!(
            (admm.objective - ipm.objective).abs() <= 1e-6 * scale,
            "case {case}: objectives diverge ({} vs {})",
            admm.objective,
            ipm.objective
        );
    }
}

#[test]
fn duals_satisfy_stationarity_and_complementarity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_02);
    for _ in 0..10 {
        let prob = random_qp(5, 8, 2, &mut rng);
        let res = solve_default(&prob);
        assert_eq!(res.status, QpStatus::Optimal);

        // Stationarity: P x + q + A' y = 0.
        let n = prob.num_vars();
        let mut px = vec![0.0; n];
        prob.p.mul_vec(&res.x, &mut px);
        let mut aty = vec![0.0; n];
        prob.a.mul_transpose_vec(&res.y, &mut aty);
        for j in 0..n {
            assert_abs_diff_eq!(px[j] + prob.q[j] + aty[j], 0.0, epsilon = 1e-6);
        }

        // Complementarity: multipliers vanish on strictly inactive rows and
        // carry the right sign on active ones.
        let mut ax = vec![0.0; prob.num_constraints()];
        prob.a.mul_vec(&res.x, &mut ax);
        for i in 0..prob.num_constraints() {
            if prob.l[i] == prob.u[i] {
                continue;
            }
            if ax[i] > prob.l[i] + 1e-5 && ax[i] < prob.u[i] - 1e-5 {
                assert_abs_diff_eq!(res.y[i], 0.0, epsilon = 1e-6);
            } else if res.y[i] > 1e-6 {
                assert_abs_diff_eq!(ax[i], prob.u[i], epsilon = 1e-5);
            } else if res.y[i] < -1e-6 {
                assert_abs_diff_eq!(ax[i], prob.l[i], epsilon = 1e-5);
            }
        }
    }
}

#[test]
fn objective_scaling_leaves_argmin_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_03);
    let base = random_qp(6, 9, 2, &mut rng);
    let reference = solve_default(&base);
    assert_eq!(reference.status, QpStatus::Optimal);
    for &c in &[0.1f64, 10.0, 1.0e3] {
        let p_scaled = {
            let mut trips = Vec::new();
            for (i, j, v) in base.p.iter_entries() {
                trips.push((i, j, c * v));
            }
            SparseMatrix::from_triplets(base.num_vars(), base.num_vars(), &trips)
        };
        let q_scaled: Vec<f64> = base.q.iter().map(|&v| c * v).collect();
        let scaled = QpProblem::new(
            p_scaled,
            q_scaled,
            base.a.clone(),
            base.l.clone(),
            base.u.clone(),
        )
        .unwrap();
        let res = solve_default(&scaled);
        assert_eq!(res.status, QpStatus::Optimal);
        for j in 0..base.num_vars() {
            assert_abs_diff_eq!(res.x[j], reference.x[j], epsilon = 1e-6);
        }
    }
}

#[test]
fn badly_scaled_problem_still_converges() {
    // Mix 1e4 and 1e-3 magnitudes; Ruiz equilibration has to absorb this.
    let p = sparse_from_dense(&[vec![2.0e4, 0.0], vec![0.0, 3.0e-3]]);
    let a = sparse_from_dense(&[vec![1.0e3, 0.0], vec![0.0, 1.0e-2], vec![5.0, -7.0]]);
    let prob = QpProblem::new(
        p,
        vec![-4.0e4, 2.0e-3],
        a,
        vec![-1.0e4, -1.0, -100.0],
        vec![1.0e4, 1.0, 100.0],
    )
    .unwrap();
    let admm = solve_default(&prob);
    let ipm = solve_qp_dense(&prob).unwrap();
    assert_eq!(admm.status, QpStatus::Optimal);
    assert_eq!(ipm.status, QpStatus::Optimal);
    let scale = 1.0 + ipm.objective.abs();
    assert!((admm.objective - ipm.objective).abs() <= 1e-6 * scale);
}

#[test]
fn primal_infeasible_is_certified() {
    // x <= -1 and x >= 1 cannot hold together.
    let p = sparse_from_dense(&[vec![1.0]]);
    let a = sparse_from_dense(&[vec![1.0], vec![1.0]]);
    let prob = QpProblem::new(
        p,
        vec![0.0],
        a,
        vec![f64::NEG_INFINITY, 1.0],
        vec![-1.0, f64::INFINITY],
    )
    .unwrap();
    let res = solve_default(&prob);
    assert_eq!(res.status, QpStatus::PrimalInfeasible);
    let cert = res.certificate.expect("certificate");
    assert_eq!(cert.len(), 2);
    // Farkas direction: A' dy ~ 0 with negative support value. Components
    // matched to infinite bounds must have the sign that keeps the support
    // finite (dy0 pushes on u0 = -1, dy1 on l1 = 1).
    assert!(cert[0] > 0.0 && cert[1] < 0.0);
    let aty = cert[0] + cert[1];
    let support = -1.0 * cert[0] + 1.0 * cert[1];
    assert!(aty.abs() <= 1e-4 * (cert[0].abs() + cert[1].abs()));
    assert!(support < 0.0);
}

#[test]
fn dual_infeasible_unbounded_direction_detected() {
    // min -x with x free below: objective unbounded.
    let p = sparse_from_dense(&[vec![0.0]]);
    let a = sparse_from_dense(&[vec![1.0]]);
    let prob = QpProblem::new(p, vec![-1.0], a, vec![0.0], vec![f64::INFINITY]).unwrap();
    let res = solve_default(&prob);
    assert_eq!(res.status, QpStatus::DualInfeasible);
    let cert = res.certificate.expect("certificate");
    assert!(cert[0] > 0.0, "descent direction must push x upward");
}

#[test]
fn indefinite_cost_is_rejected_up_front() {
    let p = sparse_from_dense(&[vec![-1.0]]);
    let a = sparse_from_dense(&[vec![1.0]]);
    let err = QpProblem::new(p, vec![0.0], a, vec![0.0], vec![1.0]).unwrap_err();
    assert!(matches!(err, QpError::NotPsd));
}

#[test]
fn asymmetric_cost_is_rejected() {
    let p = sparse_from_dense(&[vec![1.0, 0.3], vec![0.1, 1.0]]);
    let a = sparse_from_dense(&[vec![1.0, 0.0]]);
    let err = QpProblem::new(p, vec![0.0, 0.0], a, vec![0.0], vec![1.0]).unwrap_err();
    assert!(matches!(err, QpError::NotSymmetric));
}

#[test]
fn inverted_bounds_are_rejected() {
    let p = sparse_from_dense(&[vec![1.0]]);
    let a = sparse_from_dense(&[vec![1.0]]);
    let err = QpProblem::new(p, vec![0.0], a, vec![1.0], vec![0.0]).unwrap_err();
    assert!(matches!(err, QpError::BoundsInverted { row: 0 }));
}

#[test]
fn warm_start_reuses_factorization_across_q_updates() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_04);
    let prob = random_qp(8, 12, 3, &mut rng);
    let mut solver = QpSolver::new(prob.clone(), QpSettings::default()).unwrap();
    let cold = solver.solve(None);
    assert_eq!(cold.status, QpStatus::Optimal);

    let mut q2 = prob.q.clone();
    for v in q2.iter_mut() {
        *v += 0.01;
    }
    solver.update_linear_term(q2.clone()).unwrap();
    let warm_start = WarmStart { x: cold.x.clone(), y: cold.y.clone() };
    let warm = solver.solve(Some(&warm_start));
    assert_eq!(warm.status, QpStatus::Optimal);
    assert!(
        warm.iterations <= cold.iterations,
        "warm start took {} iters vs cold {}",
        warm.iterations,
        cold.iterations
    );

    // Independent check of the warm-started answer.
    let perturbed = QpProblem::new(
        prob.p.clone(),
        q2,
        prob.a.clone(),
        prob.l.clone(),
        prob.u.clone(),
    )
    .unwrap();
    let ipm = solve_qp_dense(&perturbed).unwrap();
    let scale = 1.0 + ipm.objective.abs();
    assert!((warm.objective - ipm.objective).abs() <= 1e-6 * scale);
}

#[test]
fn bound_updates_keep_equality_pattern_fixed() {
    let p = sparse_from_dense(&[vec![1.0]]);
    let a = sparse_from_dense(&[vec![1.0]]);
    let prob = QpProblem::new(p, vec![0.0], a, vec![0.0], vec![1.0]).unwrap();
    let mut solver = QpSolver::new(prob, QpSettings::default()).unwrap();
    // Turning an inequality row into an equality would silently invalidate
    // the cached rho assignment, so it must be refused.
    let err = solver.update_bounds(vec![0.5], vec![0.5]).unwrap_err();
    assert!(matches!(err, QpError::EqualityPatternChanged { row: 0 }));
    // Moving the box is fine.
    solver.update_bounds(vec![-2.0], vec![3.0]).unwrap();
    let res = solver.solve(None);
    assert_eq!(res.status, QpStatus::Optimal);
    assert_abs_diff_eq!(res.x[0], 0.0, epsilon = 1e-8);
}

#[test]
fn max_iterations_reported_when_budget_too_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_05);
    let prob = random_qp(6, 9, 2, &mut rng);
    let settings = QpSettings { max_iter: 3, polish: false, ..QpSettings::default() };
    let res = solve_qp(&prob, &settings, None).unwrap();
    assert_eq!(res.status, QpStatus::MaxIterations);
    assert!(res.iterations <= 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Both routes land on the same optimum for randomly generated
    /// feasible-by-construction strictly convex programs.
    #[test]
    fn prop_admm_and_dense_agree(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..7);
        let m = rng.gen_range(1..10);
        let eq = if m >= 2 { rng.gen_range(0..m.min(n)) } else { 0 };
        let prob = random_qp(n, m, eq, &mut rng);
        let admm = solve_default(&prob);
        let ipm = solve_qp_dense(&prob).unwrap();
        prop_assert_eq!(admm.status, QpStatus::Optimal);
        prop_assert_eq!(ipm.status, QpStatus::Optimal);
        let scale = 1.0 + admm.objective.abs().max(ipm.objective.abs());
        prop_assert!((admm.objective - ipm.objective).abs() <= 2e-6 * scale);
    }
}

