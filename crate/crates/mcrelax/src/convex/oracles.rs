//! Brute-force reference solvers for cross-checking the kernels in tests.
//! Deliberately independent of the simplex and active-set code paths: both
//! enumerate candidate active sets and solve small dense systems.

use super::{LinearProgram, QuadraticProgram};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Enumerate candidate vertices as solutions of n active constraints chosen
/// among the rows and bound faces; keep the feasible ones and return the
/// best objective with its point. `None` means no feasible vertex exists
/// (infeasible, since all test instances are box-bounded).
pub fn lp_vertex_enumeration(lp: &LinearProgram) -> Option<(f64, Vec<f64>)> {
    let n = lp.n_vars();
    let mut constraints: Vec<(Vec<f64>, f64)> = Vec::new();
    for (row, b) in lp.a_eq.iter().zip(&lp.b_eq) {
        constraints.push((row.clone(), *b));
    }
    for (row, b) in lp.a_in.iter().zip(&lp.b_in) {
        constraints.push((row.clone(), *b));
    }
    for j in 0..n {
        if lp.lower[j].is_finite() {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            constraints.push((e, lp.lower[j]));
        }
        if lp.upper[j].is_finite() {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            constraints.push((e, lp.upper[j]));
        }
    }
    let total = constraints.len();
    if total < n {
        return None;
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let a = DMatrix::from_fn(n, n, |i, j| constraints[idx[i]].0[j]);
        let b = DVector::from_fn(n, |i, _| constraints[idx[i]].1);
        if let Some(x) = a.lu().solve(&b) {
            let xv: Vec<f64> = x.iter().copied().collect();
            if lp_feasible(lp, &xv, 1e-9) {
                let obj: f64 = lp.objective.iter().zip(&xv).map(|(c, v)| c * v).sum();
                if best.as_ref().map_or(true, |(o, _)| obj < *o) {
                    best = Some((obj, xv));
                }
            }
        }
        // Next n-combination of constraint indices.
        let mut i = n;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if idx[i] != i + total - n {
                idx[i] += 1;
                for k in i + 1..n {
                    idx[k] = idx[k - 1] + 1;
                }
                break;
            }
        }
    }
}

pub fn lp_feasible(lp: &LinearProgram, x: &[f64], tol: f64) -> bool {
    for (row, b) in lp.a_eq.iter().zip(&lp.b_eq) {
        let v: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
        if (v - b).abs() > tol {
            return false;
        }
    }
    for (row, b) in lp.a_in.iter().zip(&lp.b_in) {
        let v: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
        if v > b + tol {
            return false;
        }
    }
    for j in 0..x.len() {
        if x[j] < lp.lower[j] - tol || x[j] > lp.upper[j] + tol {
            return false;
        }
    }
    true
}

/// Random box-bounded LP with up to 6 variables and 8 inequality rows.
pub fn random_lp(rng: &mut ChaCha8Rng) -> LinearProgram {
    let n = rng.gen_range(2..=6);
    let m = rng.gen_range(1..=8);
    let mut lp = LinearProgram::new(n);
    lp.objective = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for _ in 0..m {
        let row: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        lp.a_in.push(row);
        lp.b_in.push(rng.gen_range(-0.5..1.5));
    }
    lp.lower = vec![-2.0; n];
    lp.upper = vec![2.0; n];
    lp
}

/// Enumerate subsets of constraints treated as equalities, solve each KKT
/// system, keep primal and dual feasible candidates, return the best.
/// Exact for strictly convex objectives at these sizes.
pub fn qp_active_set_enumeration(qp: &QuadraticProgram) -> Option<(f64, Vec<f64>)> {
    let n = qp.n_vars();
    let mut cons: Vec<(Vec<f64>, f64)> = Vec::new();
    for (a, b) in qp.a_in.iter().zip(&qp.b_in) {
        cons.push((a.clone(), *b));
    }
    for j in 0..n {
        if qp.upper[j].is_finite() {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            cons.push((e, qp.upper[j]));
        }
        if qp.lower[j].is_finite() {
            let mut e = vec![0.0; n];
            e[j] = -1.0;
            cons.push((e, -qp.lower[j]));
        }
    }
    let n_eq = qp.a_eq.len();
    let total = cons.len();
    assert!(total <= 20, "oracle limited to small instances");
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1u32 << total) {
        let active: Vec<usize> = (0..total).filter(|i| mask >> i & 1 == 1).collect();
        if active.len() + n_eq > n {
            continue;
        }
        let k = n_eq + active.len();
        let dim = n + k;
        let mut kkt = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        for i in 0..n {
            for j in 0..n {
                kkt[(i, j)] = qp.q_matrix[i][j];
            }
            rhs[i] = -qp.linear[i];
        }
        for (r, row) in qp.a_eq.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = row[j];
                kkt[(j, n + r)] = row[j];
            }
            rhs[n + r] = qp.b_eq[r];
        }
        for (r, &ci) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + n_eq + r, j)] = cons[ci].0[j];
                kkt[(j, n + n_eq + r)] = cons[ci].0[j];
            }
            rhs[n + n_eq + r] = cons[ci].1;
        }
        let sol = match kkt.lu().solve(&rhs) {
            Some(s) => s,
            None => continue,
        };
        let x: Vec<f64> = (0..n).map(|i| sol[i]).collect();
        if (0..active.len()).any(|r| sol[n + n_eq + r] < -1e-9) {
            continue;
        }
        let mut ok = true;
        for (a, b) in &cons {
            let v: f64 = a.iter().zip(&x).map(|(p, q)| p * q).sum();
            if v > b + 1e-8 {
                ok = false;
                break;
            }
        }
        if ok {
            for (row, b) in qp.a_eq.iter().zip(&qp.b_eq) {
                let v: f64 = row.iter().zip(&x).map(|(p, q)| p * q).sum();
                if (v - b).abs() > 1e-8 {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let obj = qp.objective_at(&x);
        if best.as_ref().map_or(true, |(o, _)| obj < *o - 1e-12) {
            best = Some((obj, x));
        }
    }
    best
}

/// Random strictly convex QP with a box and a few inequality rows.
pub fn random_qp(rng: &mut ChaCha8Rng) -> QuadraticProgram {
    let n = rng.gen_range(2..=5);
    let l: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut q = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                q[i][j] += l[i][k] * l[j][k];
            }
        }
        q[i][i] += 0.5;
    }
    let m = rng.gen_range(0..=3);
    let mut a_in = Vec::new();
    let mut b_in = Vec::new();
    for _ in 0..m {
        a_in.push((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        b_in.push(rng.gen_range(-0.2..1.0));
    }
    QuadraticProgram {
        q_matrix: q,
        linear: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        a_eq: Vec::new(),
        b_eq: Vec::new(),
        a_in,
        b_in,
        lower: vec![-1.5; n],
        upper: vec![1.5; n],
    }
}
