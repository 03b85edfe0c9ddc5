//! Self-contained dense LP and convex-QP kernels.
//!
//! Both solvers work on explicit dense data: an objective, an equality
//! block, an inequality block (row' x <= rhs) and variable boxes whose
//! bounds may be infinite. The LP kernel is a two-phase primal simplex for
//! bounded variables with Bland's rule engaged after a stall; the QP kernel
//! is a primal active-set method seeded from a phase-1 LP point. Everything
//! is deterministic: identical inputs produce identical pivot sequences.

pub mod oracles;
mod qp;
mod simplex;

use thiserror::Error;

pub use qp::solve_qp;
pub use simplex::solve_lp;

/// Default kernel tolerance.
pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("inconsistent dimensions: {0}")]
    Dimension(String),
    #[error("invalid box at variable {index}: lower {lower} > upper {upper}")]
    InvalidBox { index: usize, lower: f64, upper: f64 },
    #[error("objective matrix is not positive semidefinite")]
    NotPsd,
    #[error("non-finite problem data in {0}")]
    NonFinite(String),
    #[error("post-solve verification failed: residual {residual:.3e}")]
    VerificationFailed { residual: f64 },
}

/// min c'x  s.t.  A_eq x = b_eq,  A_in x <= b_in,  lower <= x <= upper.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub a_eq: Vec<Vec<f64>>,
    pub b_eq: Vec<f64>,
    pub a_in: Vec<Vec<f64>>,
    pub b_in: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LinearProgram {
    /// Fully free problem with `n` variables and zero objective.
    pub fn new(n: usize) -> Self {
        LinearProgram {
            objective: vec![0.0; n],
            a_eq: Vec::new(),
            b_eq: Vec::new(),
            a_in: Vec::new(),
            b_in: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        let n = self.n_vars();
        for (name, rows, rhs) in [("eq", &self.a_eq, &self.b_eq), ("in", &self.a_in, &self.b_in)] {
            if rows.len() != rhs.len() {
                return Err(SolveError::Dimension(format!(
                    "{name} block: {} rows vs {} rhs entries",
                    rows.len(),
                    rhs.len()
                )));
            }
            for row in rows.iter() {
                if row.len() != n {
                    return Err(SolveError::Dimension(format!(
                        "{name} row has {} entries, expected {n}",
                        row.len()
                    )));
                }
            }
            if rows.iter().flatten().any(|v| !v.is_finite())
                || rhs.iter().any(|v| !v.is_finite())
            {
                return Err(SolveError::NonFinite(format!("{name} block")));
            }
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(SolveError::Dimension("box length".into()));
        }
        if self.objective.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFinite("objective".into()));
        }
        for i in 0..n {
            if self.lower[i] > self.upper[i] {
                return Err(SolveError::InvalidBox {
                    index: i,
                    lower: self.lower[i],
                    upper: self.upper[i],
                });
            }
        }
        Ok(())
    }

    /// Plain-text dump, one row per constraint, for external cross-checks.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        out.push_str("min");
        for c in &self.objective {
            out.push_str(&format!(" {c:.12e}"));
        }
        out.push('\n');
        dump_rows(&mut out, "eq", &self.a_eq, &self.b_eq);
        dump_rows(&mut out, "le", &self.a_in, &self.b_in);
        for i in 0..self.n_vars() {
            out.push_str(&format!("box {i}: {:.12e} {:.12e}\n", self.lower[i], self.upper[i]));
        }
        out
    }
}

/// min 1/2 x'Qx + q'x over the same constraint structure as
/// [`LinearProgram`]. `Q` must be symmetric positive semidefinite.
#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    pub q_matrix: Vec<Vec<f64>>,
    pub linear: Vec<f64>,
    pub a_eq: Vec<Vec<f64>>,
    pub b_eq: Vec<f64>,
    pub a_in: Vec<Vec<f64>>,
    pub b_in: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QuadraticProgram {
    pub fn n_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..x.len() {
            acc += self.linear[i] * x[i];
            let mut qx = 0.0;
            for j in 0..x.len() {
                qx += self.q_matrix[i][j] * x[j];
            }
            acc += 0.5 * x[i] * qx;
        }
        acc
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for row in &self.q_matrix {
            out.push_str("quad");
            for v in row {
                out.push_str(&format!(" {v:.12e}"));
            }
            out.push('\n');
        }
        out.push_str("lin");
        for c in &self.linear {
            out.push_str(&format!(" {c:.12e}"));
        }
        out.push('\n');
        dump_rows(&mut out, "eq", &self.a_eq, &self.b_eq);
        dump_rows(&mut out, "le", &self.a_in, &self.b_in);
        for i in 0..self.n_vars() {
            out.push_str(&format!("box {i}: {:.12e} {:.12e}\n", self.lower[i], self.upper[i]));
        }
        out
    }
}

fn dump_rows(out: &mut String, tag: &str, rows: &[Vec<f64>], rhs: &[f64]) {
    for (row, b) in rows.iter().zip(rhs) {
        out.push_str(tag);
        for v in row {
            out.push_str(&format!(" {v:.12e}"));
        }
        out.push_str(&format!(" | {b:.12e}\n"));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

/// Outcome of a kernel solve.
#[derive(Debug, Clone)]
pub struct Solution {
    pub status: Status,
    pub objective: f64,
    pub x: Vec<f64>,
    /// Duals of the equality rows followed by the inequality rows when
    /// Optimal; the infeasibility certificate when Infeasible.
    pub row_duals: Vec<f64>,
    /// Improving ray when Unbounded.
    pub ray: Option<Vec<f64>>,
    /// Primal-dual gap at termination (LP only; 0.0 for the QP kernel).
    pub dual_gap: f64,
    pub iterations: usize,
}
