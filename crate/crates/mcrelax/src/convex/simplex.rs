//! Two-phase primal simplex for bounded variables.
//!
//! Standard form used internally: every inequality row gets a slack, so all
//! rows are equalities over structurals + slacks, each variable carrying a
//! (possibly infinite) box. Phase 1 starts from the slack basis and adds an
//! artificial only for equality rows and for inequality rows whose slack
//! would start negative; phase 2 runs the real objective. The basis inverse
//! is kept explicitly (dense) with periodic refactorization, Dantzig pricing
//! with smallest-index ties, and Bland's rule engaged permanently once a
//! degenerate stall is detected.

use super::{LinearProgram, Solution, SolveError, Status};

const REFACTOR_EVERY: usize = 128;
const STALL_LIMIT: usize = 50;
const PIVOT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
enum VarState {
    Basic(usize),
    AtLower,
    AtUpper,
    FreeZero,
}

#[derive(Debug, Clone)]
enum Col {
    Dense(Vec<f64>),
    /// Singleton column: value at one row (slacks and artificials).
    Unit { row: usize, val: f64 },
}

impl Col {
    #[inline]
    fn dot(&self, y: &[f64]) -> f64 {
        match self {
            Col::Dense(v) => v.iter().zip(y).map(|(a, b)| a * b).sum(),
            Col::Unit { row, val } => val * y[*row],
        }
    }
}

struct Tableau {
    m: usize,
    n_struct: usize,
    cols: Vec<Col>,
    lo: Vec<f64>,
    up: Vec<f64>,
    b: Vec<f64>,
    x: Vec<f64>,
    state: Vec<VarState>,
    basis: Vec<usize>,
    /// Row-major m x m basis inverse.
    binv: Vec<f64>,
    artificials: Vec<usize>,
    pivots_since_refactor: usize,
    bland: bool,
    stall: usize,
    iterations: usize,
}

enum StepOutcome {
    Moved,
    Unbounded { entering: usize, dir: f64 },
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let n_struct = lp.n_vars();
        let m_eq = lp.a_eq.len();
        let m = m_eq + lp.a_in.len();
        let mut cols = Vec::with_capacity(n_struct + lp.a_in.len() + 4);
        for j in 0..n_struct {
            let mut col = vec![0.0; m];
            for (r, row) in lp.a_eq.iter().enumerate() {
                col[r] = row[j];
            }
            for (r, row) in lp.a_in.iter().enumerate() {
                col[m_eq + r] = row[j];
            }
            cols.push(Col::Dense(col));
        }
        let mut lo = lp.lower.clone();
        let mut up = lp.upper.clone();
        let b: Vec<f64> = lp.b_eq.iter().chain(&lp.b_in).copied().collect();
        // Slacks for inequality rows.
        for r in 0..lp.a_in.len() {
            cols.push(Col::Unit { row: m_eq + r, val: 1.0 });
            lo.push(0.0);
            up.push(f64::INFINITY);
        }
        let n_slacked = cols.len();

        // Nonbasic start: every structural at its finite bound nearest zero,
        // free variables at zero, slacks at their lower bound.
        let mut x = vec![0.0; n_slacked];
        let mut state = vec![VarState::AtLower; n_slacked];
        for j in 0..n_struct {
            let (l, u) = (lo[j], up[j]);
            state[j] = match (l.is_finite(), u.is_finite()) {
                (true, true) => {
                    if l.abs() <= u.abs() {
                        VarState::AtLower
                    } else {
                        VarState::AtUpper
                    }
                }
                (true, false) => VarState::AtLower,
                (false, true) => VarState::AtUpper,
                (false, false) => VarState::FreeZero,
            };
            x[j] = match state[j] {
                VarState::AtLower => l,
                VarState::AtUpper => u,
                _ => 0.0,
            };
        }

        // Row residuals with all structurals fixed; slacks at zero so far.
        let mut resid = b.clone();
        for j in 0..n_struct {
            if x[j] != 0.0 {
                if let Col::Dense(col) = &cols[j] {
                    for r in 0..m {
                        resid[r] -= col[r] * x[j];
                    }
                }
            }
        }

        let mut basis = vec![usize::MAX; m];
        let mut binv_diag = vec![1.0f64; m];
        let mut artificials = Vec::new();
        for r in 0..m {
            let ineq = r >= m_eq;
            if ineq && resid[r] >= 0.0 {
                // Slack carries the row.
                let s = n_struct + (r - m_eq);
                basis[r] = s;
                state[s] = VarState::Basic(r);
                x[s] = resid[r];
            } else {
                let sigma = if resid[r] >= 0.0 { 1.0 } else { -1.0 };
                let a = cols.len();
                cols.push(Col::Unit { row: r, val: sigma });
                lo.push(0.0);
                up.push(f64::INFINITY);
                x.push(sigma * resid[r]);
                state.push(VarState::Basic(r));
                basis[r] = a;
                binv_diag[r] = sigma;
                artificials.push(a);
            }
        }
        let mut binv = vec![0.0; m * m];
        for r in 0..m {
            binv[r * m + r] = binv_diag[r];
        }
        Tableau {
            m,
            n_struct,
            cols,
            lo,
            up,
            b,
            x,
            state,
            basis,
            binv,
            artificials,
            pivots_since_refactor: 0,
            bland: false,
            stall: 0,
            iterations: 0,
        }
    }

    fn n_total(&self) -> usize {
        self.cols.len()
    }

    fn duals(&self, cost: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for r in 0..m {
            let c = cost[self.basis[r]];
            if c != 0.0 {
                let row = &self.binv[r * m..(r + 1) * m];
                for k in 0..m {
                    y[k] += c * row[k];
                }
            }
        }
        y
    }

    /// Entering variable and its direction (+1 increase, -1 decrease).
    fn price(&self, cost: &[f64], y: &[f64], tol_d: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..self.n_total() {
            match self.state[j] {
                VarState::Basic(_) => continue,
                _ => {}
            }
            if self.lo[j] == self.up[j] {
                continue; // fixed, includes retired artificials
            }
            let d = cost[j] - self.cols[j].dot(y);
            let (eligible, dir) = match self.state[j] {
                VarState::AtLower => (d < -tol_d, 1.0),
                VarState::AtUpper => (d > tol_d, -1.0),
                VarState::FreeZero => (d.abs() > tol_d, if d > 0.0 { -1.0 } else { 1.0 }),
                VarState::Basic(_) => unreachable!(),
            };
            if !eligible {
                continue;
            }
            if self.bland {
                return Some((j, dir));
            }
            let score = d.abs();
            if best.map_or(true, |(_, _, s)| score > s) {
                best = Some((j, dir, score));
            }
        }
        best.map(|(j, dir, _)| (j, dir))
    }

    fn ftran(&self, e: usize) -> Vec<f64> {
        let m = self.m;
        let mut alpha = vec![0.0; m];
        match &self.cols[e] {
            Col::Unit { row, val } => {
                for r in 0..m {
                    alpha[r] = self.binv[r * m + row] * val;
                }
            }
            Col::Dense(col) => {
                for r in 0..m {
                    let row = &self.binv[r * m..(r + 1) * m];
                    alpha[r] = row.iter().zip(col).map(|(a, b)| a * b).sum();
                }
            }
        }
        alpha
    }

    /// One simplex step with entering variable `e` moving in `dir`.
    fn step(&mut self, e: usize, dir: f64) -> StepOutcome {
        let alpha = self.ftran(e);
        // Blocking analysis.
        let mut t_best = self.up[e] - self.lo[e]; // bound-to-bound flip
        let mut leave: Option<(usize, bool)> = None; // (row, hits_upper)
        for r in 0..self.m {
            let rate = -dir * alpha[r]; // d x_B[r] / dt
            let v = self.basis[r];
            if rate > PIVOT_TOL {
                if self.up[v].is_finite() {
                    let t = ((self.up[v] - self.x[v]) / rate).max(0.0);
                    if t < t_best - 1e-12 || (t < t_best + 1e-12 && self.better_leaving(&alpha, leave, r)) {
                        t_best = t;
                        leave = Some((r, true));
                    }
                }
            } else if rate < -PIVOT_TOL {
                if self.lo[v].is_finite() {
                    let t = ((self.lo[v] - self.x[v]) / rate).max(0.0);
                    if t < t_best - 1e-12 || (t < t_best + 1e-12 && self.better_leaving(&alpha, leave, r)) {
                        t_best = t;
                        leave = Some((r, false));
                    }
                }
            }
        }
        if !t_best.is_finite() {
            return StepOutcome::Unbounded { entering: e, dir };
        }
        if t_best <= 1e-12 {
            self.stall += 1;
            if self.stall > STALL_LIMIT {
                self.bland = true;
            }
        } else {
            self.stall = 0;
        }
        // Apply the move.
        self.x[e] += dir * t_best;
        for r in 0..self.m {
            let v = self.basis[r];
            self.x[v] -= dir * t_best * alpha[r];
        }
        match leave {
            None => {
                // Bound flip.
                self.state[e] = match self.state[e] {
                    VarState::AtLower => {
                        self.x[e] = self.up[e];
                        VarState::AtUpper
                    }
                    VarState::AtUpper => {
                        self.x[e] = self.lo[e];
                        VarState::AtLower
                    }
                    s => s,
                };
            }
            Some((r, hits_upper)) => {
                let v_out = self.basis[r];
                self.x[v_out] = if hits_upper { self.up[v_out] } else { self.lo[v_out] };
                self.state[v_out] = if hits_upper { VarState::AtUpper } else { VarState::AtLower };
                self.basis[r] = e;
                self.state[e] = VarState::Basic(r);
                self.update_binv(r, &alpha);
                self.pivots_since_refactor += 1;
                if self.pivots_since_refactor >= REFACTOR_EVERY {
                    self.refactor();
                }
            }
        }
        self.iterations += 1;
        StepOutcome::Moved
    }

    // Tie-break on equal ratios: prefer larger |alpha| for stability, then
    // the smaller variable index (Bland mode: smallest index only).
    fn better_leaving(&self, alpha: &[f64], incumbent: Option<(usize, bool)>, cand: usize) -> bool {
        match incumbent {
            None => true,
            Some((inc, _)) => {
                if self.bland {
                    self.basis[cand] < self.basis[inc]
                } else {
                    let (ai, ac) = (alpha[inc].abs(), alpha[cand].abs());
                    if (ac - ai).abs() > 1e-12 {
                        ac > ai
                    } else {
                        self.basis[cand] < self.basis[inc]
                    }
                }
            }
        }
    }

    fn update_binv(&mut self, r_piv: usize, alpha: &[f64]) {
        let m = self.m;
        let inv_piv = 1.0 / alpha[r_piv];
        for k in 0..m {
            self.binv[r_piv * m + k] *= inv_piv;
        }
        for r in 0..m {
            if r == r_piv {
                continue;
            }
            let f = alpha[r];
            if f != 0.0 {
                for k in 0..m {
                    let v = self.binv[r_piv * m + k];
                    self.binv[r * m + k] -= f * v;
                }
            }
        }
    }

    fn refactor(&mut self) {
        let m = self.m;
        if m == 0 {
            return;
        }
        let bmat = nalgebra::DMatrix::from_fn(m, m, |i, r| match &self.cols[self.basis[r]] {
            Col::Dense(v) => v[i],
            Col::Unit { row, val } => {
                if *row == i {
                    *val
                } else {
                    0.0
                }
            }
        });
        if let Some(inv) = bmat.try_inverse() {
            for r in 0..m {
                for k in 0..m {
                    self.binv[r * m + k] = inv[(r, k)];
                }
            }
        }
        // Clean basic values: x_B = B^-1 (b - N x_N).
        let mut rhs = self.b.clone();
        for j in 0..self.n_total() {
            if matches!(self.state[j], VarState::Basic(_)) || self.x[j] == 0.0 {
                continue;
            }
            match &self.cols[j] {
                Col::Dense(col) => {
                    for r in 0..m {
                        rhs[r] -= col[r] * self.x[j];
                    }
                }
                Col::Unit { row, val } => rhs[*row] -= val * self.x[j],
            }
        }
        for r in 0..m {
            let row = &self.binv[r * m..(r + 1) * m];
            self.x[self.basis[r]] = row.iter().zip(&rhs).map(|(a, b)| a * b).sum();
        }
        self.pivots_since_refactor = 0;
    }

    fn objective(&self, cost: &[f64]) -> f64 {
        cost.iter().zip(&self.x).map(|(c, x)| c * x).sum()
    }

    /// Run the simplex loop to optimality for the given costs.
    fn optimize(&mut self, cost: &[f64], tol: f64, cap: usize) -> RunEnd {
        let tol_d = tol * (1.0 + cost.iter().fold(0.0f64, |a, c| a.max(c.abs())));
        loop {
            if self.iterations >= cap {
                return RunEnd::Cap;
            }
            let y = self.duals(cost);
            match self.price(cost, &y, tol_d) {
                None => return RunEnd::Converged,
                Some((e, dir)) => match self.step(e, dir) {
                    StepOutcome::Moved => {}
                    StepOutcome::Unbounded { entering, dir } => {
                        return RunEnd::Unbounded { entering, dir }
                    }
                },
            }
        }
    }
}

enum RunEnd {
    Converged,
    Unbounded { entering: usize, dir: f64 },
    Cap,
}

/// Solve with the default pivot cap of 50 * (rows + columns).
pub fn solve_lp(lp: &LinearProgram, tol: f64) -> Result<Solution, SolveError> {
    let cap = 50 * (lp.a_eq.len() + lp.a_in.len() + lp.n_vars() + 2);
    solve_lp_capped(lp, tol, cap)
}

pub fn solve_lp_capped(lp: &LinearProgram, tol: f64, cap: usize) -> Result<Solution, SolveError> {
    lp.validate()?;
    let mut t = Tableau::build(lp);
    let feas_scale = 1.0 + t.b.iter().fold(0.0f64, |a, b| a.max(b.abs()));

    // Phase 1: drive the artificials to zero.
    if !t.artificials.is_empty() {
        let mut cost1 = vec![0.0; t.n_total()];
        for &a in &t.artificials {
            cost1[a] = 1.0;
        }
        let phase1 = t.optimize(&cost1, tol, cap);
        let infeas = t.objective(&cost1);
        if !matches!(phase1, RunEnd::Converged) {
            // The phase-1 objective is bounded below, so anything else is a
            // pivot-budget or numerical failure.
            return Ok(iteration_limited(&t, lp));
        }
        if infeas > tol * feas_scale {
            let y = t.duals(&cost1);
            return Ok(Solution {
                status: Status::Infeasible,
                objective: infeas,
                x: t.x[..t.n_struct].to_vec(),
                row_duals: y,
                ray: None,
                dual_gap: 0.0,
                iterations: t.iterations,
            });
        }
        // Retire artificials: clamp them to zero for phase 2.
        for &a in &t.artificials.clone() {
            t.lo[a] = 0.0;
            t.up[a] = 0.0;
            if !matches!(t.state[a], VarState::Basic(_)) {
                t.state[a] = VarState::AtLower;
                t.x[a] = 0.0;
            }
        }
    }

    // Phase 2: the real objective.
    let mut cost2 = vec![0.0; t.n_total()];
    cost2[..t.n_struct].copy_from_slice(&lp.objective);
    match t.optimize(&cost2, tol, cap) {
        RunEnd::Converged => {}
        RunEnd::Unbounded { entering, dir } => {
            let alpha = t.ftran(entering);
            let mut ray = vec![0.0; t.n_struct];
            if entering < t.n_struct {
                ray[entering] = dir;
            }
            for r in 0..t.m {
                let v = t.basis[r];
                if v < t.n_struct {
                    ray[v] = -dir * alpha[r];
                }
            }
            return Ok(Solution {
                status: Status::Unbounded,
                objective: f64::NEG_INFINITY,
                x: t.x[..t.n_struct].to_vec(),
                row_duals: Vec::new(),
                ray: Some(ray),
                dual_gap: 0.0,
                iterations: t.iterations,
            });
        }
        RunEnd::Cap => return Ok(iteration_limited(&t, lp)),
    }

    // Independent feasibility check on the original data.
    let x = t.x[..t.n_struct].to_vec();
    let mut worst = 0.0f64;
    for (row, b) in lp.a_eq.iter().zip(&lp.b_eq) {
        let v: f64 = row.iter().zip(&x).map(|(a, b)| a * b).sum();
        let scale = 1.0 + b.abs() + row.iter().fold(0.0f64, |a, c| a.max(c.abs()));
        worst = worst.max((v - b).abs() / scale);
    }
    for (row, b) in lp.a_in.iter().zip(&lp.b_in) {
        let v: f64 = row.iter().zip(&x).map(|(a, b)| a * b).sum();
        let scale = 1.0 + b.abs() + row.iter().fold(0.0f64, |a, c| a.max(c.abs()));
        worst = worst.max(((v - b) / scale).max(0.0));
    }
    for j in 0..t.n_struct {
        let scale = 1.0 + x[j].abs();
        worst = worst.max((lp.lower[j] - x[j]).max(0.0) / scale);
        worst = worst.max((x[j] - lp.upper[j]).max(0.0) / scale);
    }
    if worst > 10.0 * tol {
        return Err(SolveError::VerificationFailed { residual: worst });
    }

    // Duals and the bounded-simplex dual objective.
    let y = t.duals(&cost2);
    let tol_d = tol * (1.0 + cost2.iter().fold(0.0f64, |a, c| a.max(c.abs())));
    let mut dual_obj: f64 = t.b.iter().zip(&y).map(|(a, b)| a * b).sum();
    for j in 0..t.n_total() {
        if matches!(t.state[j], VarState::Basic(_)) {
            continue;
        }
        let mut d = cost2[j] - t.cols[j].dot(&y);
        if d.abs() <= tol_d {
            d = 0.0;
        }
        if d > 0.0 && t.lo[j].is_finite() {
            dual_obj += d * t.lo[j];
        } else if d < 0.0 && t.up[j].is_finite() {
            dual_obj += d * t.up[j];
        } else if d != 0.0 {
            dual_obj = f64::NEG_INFINITY; // dual infeasible direction left over
        }
    }
    let objective = t.objective(&cost2);
    Ok(Solution {
        status: Status::Optimal,
        objective,
        x,
        row_duals: y,
        ray: None,
        dual_gap: objective - dual_obj,
        iterations: t.iterations,
    })
}

fn iteration_limited(t: &Tableau, lp: &LinearProgram) -> Solution {
    let x = t.x[..t.n_struct].to_vec();
    let objective = lp.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    Solution {
        status: Status::IterationLimit,
        objective,
        x,
        row_duals: Vec::new(),
        ray: None,
        dual_gap: f64::INFINITY,
        iterations: t.iterations,
    }
}
