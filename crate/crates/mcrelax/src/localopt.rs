//! Box-constrained limited-memory quasi-Newton minimization, and the
//! reduced-space reconstruction built on top of it.
//!
//! The optimizer takes projected-gradient steps with a limited-memory
//! quasi-Newton direction on the free variables: the active set is
//! identified by gradient projection, the two-loop recursion supplies the
//! scaling, and a backtracking line search on the projected path enforces
//! sufficient decrease. Iterates respect the box exactly (plain clamping).

use crate::fem::{adjoint_gradient_with_state, misfit, solve_state, FemError, NodalField, ProblemData};
use crate::mesh::{CellField, GridTriple};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptError {
    #[error("objective oracle failed: {0}")]
    Oracle(String),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Mesh(#[from] crate::mesh::MeshError),
    #[error("dimension mismatch between box and start point")]
    Dimension,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoxQnConfig {
    /// Curvature pairs kept.
    pub memory: usize,
    /// Projected-gradient stop tolerance, scaled by (1 + |f(x0)|).
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Sufficient-decrease constant of the backtracking line search.
    pub armijo: f64,
    /// Step shrink factor.
    pub backtrack: f64,
}

impl Default for BoxQnConfig {
    fn default() -> Self {
        BoxQnConfig {
            memory: 10,
            grad_tol: 1e-10,
            max_iters: 500,
            armijo: 1e-4,
            backtrack: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptStatus {
    Converged,
    IterationLimit,
    LineSearchFailed,
    OracleFailed,
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub status: OptStatus,
}

fn clamp_vec(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Minimize a smooth objective over a box from `x0`. The oracle returns the
/// value and gradient; a failing oracle aborts with the last iterate.
pub fn minimize_box<F>(
    mut oracle: F,
    lower: &[f64],
    upper: &[f64],
    x0: &[f64],
    cfg: &BoxQnConfig,
) -> Result<MinimizeResult, OptError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), String>,
{
    let n = x0.len();
    if lower.len() != n || upper.len() != n {
        return Err(OptError::Dimension);
    }
    let mut x = x0.to_vec();
    clamp_vec(&mut x, lower, upper);
    let (mut f, mut g) = match oracle(&x) {
        Ok(pair) => pair,
        Err(e) => return Err(OptError::Oracle(e)),
    };
    let eff_tol = cfg.grad_tol * (1.0 + f.abs());
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();

    for iter in 0..cfg.max_iters {
        // Projected gradient: x - P(x - g).
        let mut pg = vec![0.0; n];
        for i in 0..n {
            pg[i] = x[i] - (x[i] - g[i]).clamp(lower[i], upper[i]);
        }
        if inf_norm(&pg) <= eff_tol {
            return Ok(MinimizeResult {
                x,
                f,
                iterations: iter,
                status: OptStatus::Converged,
            });
        }

        // Active set by gradient sign at the bounds.
        let active: Vec<bool> = (0..n)
            .map(|i| {
                (x[i] <= lower[i] + 1e-14 && g[i] > 0.0)
                    || (x[i] >= upper[i] - 1e-14 && g[i] < 0.0)
            })
            .collect();
        let mut g_free = g.clone();
        for i in 0..n {
            if active[i] {
                g_free[i] = 0.0;
            }
        }

        // Two-loop recursion on the free gradient.
        let mut d = two_loop(&pairs, &g_free);
        for i in 0..n {
            if active[i] {
                d[i] = 0.0;
            }
        }
        let descent: f64 = g_free.iter().zip(&d).map(|(a, b)| a * b).sum();
        if descent >= -1e-14 * inf_norm(&g_free) * inf_norm(&d).max(1e-300) {
            for i in 0..n {
                d[i] = -g_free[i];
            }
        }

        // Backtracking along the projected path.
        let mut alpha = 1.0f64;
        let mut accepted: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        while alpha >= 1e-18 {
            let mut x_new: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            clamp_vec(&mut x_new, lower, upper);
            let delta: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let gd: f64 = g.iter().zip(&delta).map(|(a, b)| a * b).sum();
            if gd >= 0.0 {
                alpha *= cfg.backtrack;
                continue;
            }
            let (f_new, g_new) = match oracle(&x_new) {
                Ok(pair) => pair,
                Err(_) => {
                    return Ok(MinimizeResult {
                        x,
                        f,
                        iterations: iter,
                        status: OptStatus::OracleFailed,
                    })
                }
            };
            if f_new <= f + cfg.armijo * gd {
                accepted = Some((x_new, f_new, g_new));
                break;
            }
            alpha *= cfg.backtrack;
        }
        let (x_new, f_new, g_new) = match accepted {
            Some(t) => t,
            None => {
                if !pairs.is_empty() {
                    // Quasi-Newton scaling misled the search; restart from
                    // steepest descent.
                    pairs.clear();
                    continue;
                }
                return Ok(MinimizeResult {
                    x,
                    f,
                    iterations: iter,
                    status: OptStatus::LineSearchFailed,
                });
            }
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let s_norm: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y_norm: f64 = yv.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sy > 1e-10 * s_norm * y_norm {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, yv, sy));
        }
        x = x_new;
        f = f_new;
        g = g_new;
    }
    Ok(MinimizeResult {
        x,
        f,
        iterations: cfg.max_iters,
        status: OptStatus::IterationLimit,
    })
}

fn two_loop(pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, g: &[f64]) -> Vec<f64> {
    let mut q = g.to_vec();
    if pairs.is_empty() {
        for v in &mut q {
            *v = -*v;
        }
        return q;
    }
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, sy) in pairs.iter().rev() {
        let a = s.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / sy;
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    // Initial scaling from the most recent pair.
    let (_, y_last, sy_last) = pairs.back().unwrap();
    let yy: f64 = y_last.iter().map(|v| v * v).sum();
    let gamma = if yy > 0.0 { sy_last / yy } else { 1.0 };
    for qi in q.iter_mut() {
        *qi *= gamma;
    }
    for ((s, y, sy), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = y.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / sy;
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    for v in &mut q {
        *v = -*v;
    }
    q
}

/// Result of a reduced-space reconstruction.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub w: CellField,
    pub u: NodalField,
    /// Unsquared misfit ||u(w) - ydelta||.
    pub misfit: f64,
    /// The minimized objective 1/2 * misfit^2.
    pub objective: f64,
    pub iterations: usize,
    pub status: OptStatus,
}

/// Minimize w -> 1/2 || u(w) - ydelta ||^2 over the coefficient box with
/// the adjoint gradient, starting from `w0`.
pub fn reconstruct(
    pd: &ProblemData,
    triple: &GridTriple,
    ydelta: &NodalField,
    w0: &CellField,
    cfg: &BoxQnConfig,
) -> Result<Reconstruction, OptError> {
    let n_h = triple.n_h();
    let lower = vec![pd.w_box.0; n_h];
    let upper = vec![pd.w_box.1; n_h];
    let h_grid = triple.h.clone();
    let sim = triple.sim.clone();
    let pd_inner = pd.clone();
    let y_inner = ydelta.clone();
    let oracle = move |vals: &[f64]| -> Result<(f64, Vec<f64>), String> {
        let w = CellField::new(h_grid.clone(), vals.to_vec()).map_err(|e| e.to_string())?;
        let (grad, _, objective) = adjoint_gradient_with_state(&pd_inner, &w, &y_inner, &sim)
            .map_err(|e| e.to_string())?;
        Ok((objective, grad.values))
    };
    let result = minimize_box(oracle, &lower, &upper, &w0.values, cfg)?;
    let w = CellField::new(triple.h.clone(), result.x.clone())?;
    let u = solve_state(pd, &w, &triple.sim)?;
    let fit = misfit(&u, ydelta)?;
    Ok(Reconstruction {
        w,
        u,
        misfit: fit,
        objective: 0.5 * fit * fit,
        iterations: result.iterations,
        status: result.status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::{solve_qp, QuadraticProgram, DEFAULT_TOL};
    use crate::fem::ScalarFn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_with_interior_minimizer() {
        let a = [0.2, -0.3, 0.7];
        let oracle = |x: &[f64]| {
            let f: f64 = x.iter().zip(&a).map(|(xi, ai)| 0.5 * (xi - ai).powi(2)).sum();
            let g: Vec<f64> = x.iter().zip(&a).map(|(xi, ai)| xi - ai).collect();
            Ok((f, g))
        };
        let cfg = BoxQnConfig::default();
        let res = minimize_box(oracle, &[-1.0; 3], &[1.0; 3], &[0.9, 0.9, -0.9], &cfg).unwrap();
        assert_eq!(res.status, OptStatus::Converged);
        for (x, t) in res.x.iter().zip(&a) {
            assert!((x - t).abs() < 1e-8);
        }
    }

    #[test]
    fn quadratic_with_exterior_minimizer_projects() {
        let a = [2.0, -3.0];
        let oracle = |x: &[f64]| {
            let f: f64 = x.iter().zip(&a).map(|(xi, ai)| 0.5 * (xi - ai).powi(2)).sum();
            let g: Vec<f64> = x.iter().zip(&a).map(|(xi, ai)| xi - ai).collect();
            Ok((f, g))
        };
        let cfg = BoxQnConfig::default();
        let res = minimize_box(oracle, &[-1.0; 2], &[1.0; 2], &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(res.status, OptStatus::Converged);
        assert!((res.x[0] - 1.0).abs() < 1e-12);
        assert!((res.x[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rosenbrock_on_box_matches_grid_search() {
        let oracle = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            Ok((f, g))
        };
        let cfg = BoxQnConfig {
            max_iters: 2000,
            ..BoxQnConfig::default()
        };
        let res = minimize_box(oracle, &[0.0; 2], &[2.0; 2], &[0.2, 1.8], &cfg).unwrap();
        // Grid search at step 1e-3.
        let mut best = f64::INFINITY;
        for i in 0..=2000 {
            for j in 0..=2000 {
                let (a, b) = (i as f64 * 1e-3, j as f64 * 1e-3);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                if f < best {
                    best = f;
                }
            }
        }
        assert!((res.f - best).abs() < 1e-4, "qn {} vs grid {best}", res.f);
    }

    #[test]
    fn strictly_convex_quadratics_match_qp_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
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
                q[i][i] += 0.3;
            }
            let lin: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let qp = QuadraticProgram {
                q_matrix: q.clone(),
                linear: lin.clone(),
                a_eq: Vec::new(),
                b_eq: Vec::new(),
                a_in: Vec::new(),
                b_in: Vec::new(),
                lower: vec![-1.0; n],
                upper: vec![1.0; n],
            };
            let reference = solve_qp(&qp, DEFAULT_TOL).unwrap();
            let oracle = |x: &[f64]| {
                let mut f = 0.0;
                let mut g = lin.clone();
                for i in 0..n {
                    let mut qx = 0.0;
                    for j in 0..n {
                        qx += q[i][j] * x[j];
                    }
                    f += 0.5 * x[i] * qx + lin[i] * x[i];
                    g[i] += qx;
                }
                Ok((f, g))
            };
            let cfg = BoxQnConfig {
                grad_tol: 1e-12,
                max_iters: 3000,
                ..BoxQnConfig::default()
            };
            let res = minimize_box(oracle, &qp.lower, &qp.upper, &vec![0.0; n], &cfg).unwrap();
            for (a, b) in res.x.iter().zip(&reference.x) {
                assert!((a - b).abs() < 1e-6, "qn {a} vs qp {b}");
            }
        }
    }

    #[test]
    fn oracle_failure_returns_last_iterate() {
        let mut calls = 0;
        let oracle = move |x: &[f64]| {
            calls += 1;
            if calls > 1 {
                return Err("blew up".to_string());
            }
            Ok((x[0] * x[0], vec![2.0 * x[0]]))
        };
        let cfg = BoxQnConfig::default();
        let res = minimize_box(oracle, &[-10.0], &[10.0], &[5.0], &cfg).unwrap();
        assert_eq!(res.status, OptStatus::OracleFailed);
        assert_eq!(res.x[0], 5.0, "last iterate kept");
    }

    #[test]
    fn reconstruct_fixed_point_at_own_data() {
        let pd = ProblemData {
            f0: ScalarFn::constant(2.0),
            f1: ScalarFn::constant(1.0),
            w_box: (0.0, 1.0),
            s: 1.0,
        };
        let triple = GridTriple::from_counts(48, 4, 4).unwrap();
        let w0 = CellField::new(triple.h.clone(), vec![0.3, 0.8, 0.1, 0.6]).unwrap();
        let y = solve_state(&pd, &w0, &triple.sim).unwrap();
        let rec = reconstruct(&pd, &triple, &y, &w0, &BoxQnConfig::default()).unwrap();
        assert_eq!(rec.status, OptStatus::Converged);
        assert_eq!(rec.iterations, 0);
        for (a, b) in rec.w.values.iter().zip(&w0.values) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(rec.misfit < 1e-12);
    }
}
