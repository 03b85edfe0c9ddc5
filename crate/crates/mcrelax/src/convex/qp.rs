//! Primal active-set method for convex quadratic programs.
//!
//! The working set starts from the equality rows; a feasible point comes
//! from a phase-1 LP solve with zero cost. Each iteration solves the
//! equality-constrained KKT system on the current working set (with a tiny
//! Tikhonov lift inside the factorization only), then either takes the full
//! step, adds the first blocking constraint, or drops the constraint with
//! the most negative multiplier. Reported objectives always use the
//! unlifted matrix.

use super::{simplex::solve_lp, LinearProgram, QuadraticProgram, Solution, SolveError, Status};
use nalgebra::{DMatrix, DVector};

const LIFT: f64 = 1e-12;

struct Row {
    a: Vec<f64>,
    b: f64,
    /// Index into the caller's inequality block; box faces carry None.
    source: Option<usize>,
}

pub fn solve_qp(qp: &QuadraticProgram, tol: f64) -> Result<Solution, SolveError> {
    let n = qp.n_vars();
    validate(qp)?;

    // Phase 1: any feasible point via the LP kernel.
    let feas_lp = LinearProgram {
        objective: vec![0.0; n],
        a_eq: qp.a_eq.clone(),
        b_eq: qp.b_eq.clone(),
        a_in: qp.a_in.clone(),
        b_in: qp.b_in.clone(),
        lower: qp.lower.clone(),
        upper: qp.upper.clone(),
    };
    let feas = solve_lp(&feas_lp, tol)?;
    match feas.status {
        Status::Optimal => {}
        Status::Infeasible => {
            return Ok(Solution {
                status: Status::Infeasible,
                objective: feas.objective,
                x: feas.x,
                row_duals: feas.row_duals,
                ray: None,
                dual_gap: 0.0,
                iterations: feas.iterations,
            })
        }
        _ => {
            return Ok(Solution {
                status: Status::IterationLimit,
                objective: f64::NAN,
                x: feas.x,
                row_duals: Vec::new(),
                ray: None,
                dual_gap: f64::INFINITY,
                iterations: feas.iterations,
            })
        }
    }
    let mut x = feas.x;

    // Inequality rows plus box faces as explicit rows.
    let mut rows: Vec<Row> = Vec::new();
    for (i, (a, b)) in qp.a_in.iter().zip(&qp.b_in).enumerate() {
        rows.push(Row {
            a: a.clone(),
            b: *b,
            source: Some(i),
        });
    }
    for j in 0..n {
        if qp.upper[j].is_finite() {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            rows.push(Row {
                a: e,
                b: qp.upper[j],
                source: None,
            });
        }
        if qp.lower[j].is_finite() {
            let mut e = vec![0.0; n];
            e[j] = -1.0;
            rows.push(Row {
                a: e,
                b: -qp.lower[j],
                source: None,
            });
        }
    }

    let n_eq = qp.a_eq.len();
    let mut working: Vec<usize> = Vec::new();
    let cap = 50 * (n + rows.len() + n_eq + 2);
    let mut iterations = 0usize;
    #[allow(unused_assignments)]
    let mut lambda_work: Vec<f64> = Vec::new();

    loop {
        if iterations >= cap {
            return Ok(Solution {
                status: Status::IterationLimit,
                objective: qp.objective_at(&x),
                x,
                row_duals: Vec::new(),
                ray: None,
                dual_gap: f64::INFINITY,
                iterations,
            });
        }
        iterations += 1;

        let mut g = qp.linear.clone();
        for i in 0..n {
            for j in 0..n {
                g[i] += qp.q_matrix[i][j] * x[j];
            }
        }

        // KKT system on the working set (equalities first).
        let k = n_eq + working.len();
        let dim = n + k;
        let mut kkt = DMatrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                kkt[(i, j)] = qp.q_matrix[i][j];
            }
            kkt[(i, i)] += LIFT;
        }
        for (r, row) in qp.a_eq.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = row[j];
                kkt[(j, n + r)] = row[j];
            }
        }
        for (r, &w) in working.iter().enumerate() {
            for j in 0..n {
                kkt[(n + n_eq + r, j)] = rows[w].a[j];
                kkt[(j, n + n_eq + r)] = rows[w].a[j];
            }
        }
        let mut rhs = DVector::zeros(dim);
        for i in 0..n {
            rhs[i] = -g[i];
        }
        let sol = match kkt.lu().solve(&rhs) {
            Some(s) => s,
            None => {
                // Dependent working set; drop the youngest member.
                if working.pop().is_none() {
                    return Err(SolveError::NotPsd);
                }
                continue;
            }
        };
        let p: Vec<f64> = (0..n).map(|i| sol[i]).collect();
        lambda_work = (0..working.len()).map(|r| sol[n + n_eq + r]).collect();
        let step_norm = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let x_scale = 1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()));

        if step_norm <= tol * x_scale {
            // Stationary on the working set; drop the most negative
            // multiplier if there is one, otherwise done.
            let mut min_lambda = 0.0;
            let mut drop_idx: Option<usize> = None;
            for (r, &l) in lambda_work.iter().enumerate() {
                if l < min_lambda {
                    min_lambda = l;
                    drop_idx = Some(r);
                }
            }
            if min_lambda >= -tol {
                break;
            }
            working.remove(drop_idx.unwrap());
            lambda_work.clear();
            continue;
        }

        // Ratio test against constraints outside the working set.
        let mut alpha = 1.0f64;
        let mut blocker: Option<usize> = None;
        for (idx, row) in rows.iter().enumerate() {
            if working.contains(&idx) {
                continue;
            }
            let ap: f64 = row.a.iter().zip(&p).map(|(a, b)| a * b).sum();
            let row_scale = 1.0 + row.a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if ap > 1e-12 * row_scale {
                let value: f64 = row.a.iter().zip(&x).map(|(a, b)| a * b).sum();
                let a_i = ((row.b - value) / ap).max(0.0);
                if a_i < alpha - 1e-14 {
                    alpha = a_i;
                    blocker = Some(idx);
                }
            }
        }
        for (xi, pi) in x.iter_mut().zip(&p) {
            *xi += alpha * pi;
        }
        if let Some(idx) = blocker {
            working.push(idx);
        }
    }

    // Multipliers for the caller's inequality rows; bound-face multipliers
    // are internal and not reported.
    let mut row_duals = vec![0.0; n_eq + qp.a_in.len()];
    for (r, &w) in working.iter().enumerate() {
        if let Some(src) = rows[w].source {
            row_duals[n_eq + src] = lambda_work.get(r).copied().unwrap_or(0.0).max(0.0);
        }
    }
    if n_eq > 0 {
        // Equality multipliers via least squares on the stationarity
        // residual left after the inequality contributions.
        let mut resid = qp.linear.clone();
        for i in 0..n {
            for j in 0..n {
                resid[i] += qp.q_matrix[i][j] * x[j];
            }
        }
        for (r, &w) in working.iter().enumerate() {
            let l = lambda_work.get(r).copied().unwrap_or(0.0).max(0.0);
            for j in 0..n {
                resid[j] += l * rows[w].a[j];
            }
        }
        let a = DMatrix::from_fn(n, n_eq, |i, r| qp.a_eq[r][i]);
        let rhs = DVector::from_fn(n, |i, _| -resid[i]);
        let ata = a.transpose() * &a;
        let atb = a.transpose() * rhs;
        if let Some(mu) = ata.lu().solve(&atb) {
            for r in 0..n_eq {
                row_duals[r] = mu[r];
            }
        }
    }

    Ok(Solution {
        status: Status::Optimal,
        objective: qp.objective_at(&x),
        x,
        row_duals,
        ray: None,
        dual_gap: 0.0,
        iterations,
    })
}

fn validate(qp: &QuadraticProgram) -> Result<(), SolveError> {
    let n = qp.n_vars();
    if qp.q_matrix.len() != n || qp.q_matrix.iter().any(|r| r.len() != n) {
        return Err(SolveError::Dimension("quadratic matrix".into()));
    }
    for i in 0..n {
        for j in 0..i {
            if (qp.q_matrix[i][j] - qp.q_matrix[j][i]).abs()
                > 1e-10 * (1.0 + qp.q_matrix[i][j].abs())
            {
                return Err(SolveError::NotPsd);
            }
        }
    }
    // PSD check by attempted Cholesky of Q plus a tiny diagonal shift.
    let mut m = DMatrix::from_fn(n, n, |i, j| qp.q_matrix[i][j]);
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    for i in 0..n {
        m[(i, i)] += 1e-10 * scale;
    }
    if nalgebra::Cholesky::new(m).is_none() {
        return Err(SolveError::NotPsd);
    }
    let lp_view = LinearProgram {
        objective: qp.linear.clone(),
        a_eq: qp.a_eq.clone(),
        b_eq: qp.b_eq.clone(),
        a_in: qp.a_in.clone(),
        b_in: qp.b_in.clone(),
        lower: qp.lower.clone(),
        upper: qp.upper.clone(),
    };
    lp_view.validate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::oracles::{qp_active_set_enumeration, random_qp};
    use crate::convex::DEFAULT_TOL;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn box_qp(n: usize) -> QuadraticProgram {
        QuadraticProgram {
            q_matrix: (0..n)
                .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            linear: vec![0.0; n],
            a_eq: Vec::new(),
            b_eq: Vec::new(),
            a_in: Vec::new(),
            b_in: Vec::new(),
            lower: vec![-1.0; n],
            upper: vec![1.0; n],
        }
    }

    #[test]
    fn unconstrained_minimizer_inside_box() {
        // min 1/2 ||x - a||^2 with a inside the box: x = a, objective 0.
        let mut qp = box_qp(3);
        let a = [0.3, -0.4, 0.9];
        qp.linear = a.iter().map(|v| -v).collect();
        let sol = solve_qp(&qp, DEFAULT_TOL).unwrap();
        assert_eq!(sol.status, Status::Optimal);
        for (x, t) in sol.x.iter().zip(&a) {
            assert!((x - t).abs() < 1e-8);
        }
        let shifted = sol.objective + 0.5 * a.iter().map(|v| v * v).sum::<f64>();
        assert!(shifted.abs() < 1e-12);
    }

    #[test]
    fn active_bound_example() {
        // min 1/2 x^2 s.t. x >= 1.
        let qp = QuadraticProgram {
            q_matrix: vec![vec![1.0]],
            linear: vec![0.0],
            a_eq: Vec::new(),
            b_eq: Vec::new(),
            a_in: vec![vec![-1.0]],
            b_in: vec![-1.0],
            lower: vec![f64::NEG_INFINITY],
            upper: vec![f64::INFINITY],
        };
        let sol = solve_qp(&qp, DEFAULT_TOL).unwrap();
        assert_eq!(sol.status, Status::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-9);
        assert!((sol.objective - 0.5).abs() < 1e-9);
        assert!(sol.row_duals[0] > 0.0);
    }

    #[test]
    fn infeasible_detected_by_phase_one() {
        let mut qp = box_qp(1);
        qp.a_in = vec![vec![1.0], vec![-1.0]];
        qp.b_in = vec![-2.0, -2.0];
        let sol = solve_qp(&qp, DEFAULT_TOL).unwrap();
        assert_eq!(sol.status, Status::Infeasible);
    }

    #[test]
    fn asymmetric_matrix_rejected() {
        let mut qp = box_qp(2);
        qp.q_matrix[0][1] = 0.5;
        assert!(matches!(solve_qp(&qp, DEFAULT_TOL), Err(SolveError::NotPsd)));
    }

    #[test]
    fn random_qps_match_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4040);
        let mut solved = 0;
        while solved < 50 {
            let qp = random_qp(&mut rng);
            let sol = solve_qp(&qp, DEFAULT_TOL).unwrap();
            let oracle = qp_active_set_enumeration(&qp);
            match (sol.status, oracle) {
                (Status::Optimal, Some((obj, _))) => {
                    assert!(
                        (sol.objective - obj).abs() < 1e-8 * (1.0 + obj.abs()),
                        "kernel {} vs oracle {obj}",
                        sol.objective
                    );
                    solved += 1;
                }
                (Status::Infeasible, None) => {
                    solved += 1;
                }
                (s, o) => panic!("status {s:?} vs oracle {:?}", o.map(|p| p.0)),
            }
        }
    }

    #[test]
    fn stationarity_holds_at_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let qp = random_qp(&mut rng);
            let sol = solve_qp(&qp, DEFAULT_TOL).unwrap();
            if sol.status != Status::Optimal {
                continue;
            }
            let n = qp.n_vars();
            let mut r = qp.linear.clone();
            for i in 0..n {
                for j in 0..n {
                    r[i] += qp.q_matrix[i][j] * sol.x[j];
                }
            }
            for (i, a) in qp.a_in.iter().enumerate() {
                for j in 0..n {
                    r[j] += sol.row_duals[i] * a[j];
                }
            }
            // Components pushed outward at active bounds carry the bound
            // multiplier; zero them before testing the rest.
            for j in 0..n {
                let at_lo = (sol.x[j] - qp.lower[j]).abs() < 1e-7;
                let at_up = (sol.x[j] - qp.upper[j]).abs() < 1e-7;
                if (at_lo && r[j] > 0.0) || (at_up && r[j] < 0.0) {
                    r[j] = 0.0;
                }
            }
            let worst = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(worst < 1e-6, "stationarity residual {worst}");
        }
    }
}
