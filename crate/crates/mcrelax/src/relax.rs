//! The locally averaged convex relaxation of the bilinear state equation.
//!
//! The bilinear term `f0 * u * w` is replaced by `f0 * z` with one new
//! variable per averaging cell, coupled to the cell averages of `u` and the
//! cell value of `w` through the four McCormick envelope rows of each cell.
//! Per-cell bounds on the averaged state enter both the envelope rows and
//! explicit state-bound rows; the product variable carries the interval
//! product of the current bounds.
//!
//! Since the equality block `K u + G z = F` determines `u` uniquely from
//! `z` (the stiffness block is fixed and invertible), the model stores the
//! solved form `u = u0 - W z` and hands the kernels a reduced problem over
//! `(w, z)` only. This is an exact reformulation: feasible sets are in
//! objective-preserving bijection, and the full `(u, w, z)` point is
//! recovered on the way out.

use crate::convex::{
    solve_qp, LinearProgram, QuadraticProgram, Solution, SolveError, Status, DEFAULT_TOL,
};
use crate::fem::{
    averaged_loads, load_interior, mass_full, misfit, solve_state_averaged, stiffness_interior,
    FemError, NodalField, ProblemData,
};
use crate::linalg::LinalgError;
use crate::mesh::{cell_average_weights, AveragingWeights, CellField, GridTriple, MeshError};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RelaxError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Kernel(#[from] SolveError),
    #[error("profile dimensions do not match the grid triple ({0})")]
    Dimension(String),
    #[error("z bounds of cell {cell} are stale; re-derive them from the u/w bounds")]
    StaleZBounds { cell: usize },
    #[error("relaxation infeasible: bound profile inconsistent (bounds too tight)")]
    ProfileInfeasible,
    #[error("kernel returned {0:?} instead of an optimum")]
    KernelFailed(Status),
}

/// Per-cell bounds feeding the envelope: state bounds per averaging cell,
/// coefficient bounds per coefficient cell, product bounds per averaging
/// cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsProfile {
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    pub w_lo: Vec<f64>,
    pub w_hi: Vec<f64>,
    pub z_lo: Vec<f64>,
    pub z_hi: Vec<f64>,
}

impl BoundsProfile {
    /// Conservative start: |averaged u| <= u_mag on every cell, the global
    /// coefficient box everywhere, product bounds derived.
    pub fn conservative(triple: &GridTriple, u_mag: f64, w_box: (f64, f64)) -> Self {
        let n_tau = triple.n_tau();
        let n_h = triple.n_h();
        let mut profile = BoundsProfile {
            u_lo: vec![-u_mag; n_tau],
            u_hi: vec![u_mag; n_tau],
            w_lo: vec![w_box.0; n_h],
            w_hi: vec![w_box.1; n_h],
            z_lo: vec![0.0; n_tau],
            z_hi: vec![0.0; n_tau],
        };
        profile.derive_z_bounds(triple);
        profile
    }

    /// Interval product: per cell the min/max over the four corner
    /// products of the current u and w bounds.
    pub fn derive_z_bounds(&mut self, triple: &GridTriple) {
        for i in 0..self.u_lo.len() {
            let j = triple.owner_of(i);
            let corners = [
                self.u_lo[i] * self.w_lo[j],
                self.u_lo[i] * self.w_hi[j],
                self.u_hi[i] * self.w_lo[j],
                self.u_hi[i] * self.w_hi[j],
            ];
            self.z_lo[i] = corners.iter().cloned().fold(f64::INFINITY, f64::min);
            self.z_hi[i] = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
    }

    /// Total width of the state bounds (the quantity bound tightening
    /// shrinks).
    pub fn bound_volume(&self) -> f64 {
        self.u_lo
            .iter()
            .zip(&self.u_hi)
            .map(|(lo, hi)| hi - lo)
            .sum()
    }

    fn check_dims(&self, triple: &GridTriple) -> Result<(), RelaxError> {
        let n_tau = triple.n_tau();
        let n_h = triple.n_h();
        if self.u_lo.len() != n_tau
            || self.u_hi.len() != n_tau
            || self.z_lo.len() != n_tau
            || self.z_hi.len() != n_tau
        {
            return Err(RelaxError::Dimension(format!(
                "expected {n_tau} tau-cell bounds"
            )));
        }
        if self.w_lo.len() != n_h || self.w_hi.len() != n_h {
            return Err(RelaxError::Dimension(format!(
                "expected {n_h} h-cell bounds"
            )));
        }
        Ok(())
    }
}

/// The four envelope expressions at a point; feasibility means all <= 0.
pub fn mcc_row_values(
    u_avg: f64,
    w: f64,
    z: f64,
    u_lo: f64,
    u_hi: f64,
    w_lo: f64,
    w_hi: f64,
) -> [f64; 4] {
    [
        u_lo * w + u_avg * w_lo - u_lo * w_lo - z,
        u_hi * w + u_avg * w_hi - u_hi * w_hi - z,
        z - u_hi * w - u_avg * w_lo + u_hi * w_lo,
        z - u_lo * w - u_avg * w_hi + u_lo * w_hi,
    ]
}

/// One inequality row over the reduced variables [w..., z...].
#[derive(Debug, Clone)]
pub struct LinRow {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

// Grid- and data-dependent parts that do not change when bounds move.
#[derive(Debug)]
struct Geometry {
    pd: ProblemData,
    triple: GridTriple,
    weights: AveragingWeights,
    /// Solution of the stiffness system with no reaction (full nodal).
    u0: Vec<f64>,
    /// Columns of K^-1 G (full nodal), one per tau cell.
    w_cols: Vec<Vec<f64>>,
    /// a_i' u0 per tau cell.
    avg_u0: Vec<f64>,
    /// avg_w[i][k] = a_i' w_cols[k].
    avg_w: Vec<Vec<f64>>,
    /// W' M W (z block of the quadratic objective).
    q_z: Vec<Vec<f64>>,
    /// -W' M (u0 - ydelta).
    q_lin: Vec<f64>,
    /// 1/2 || u0 - ydelta ||_M^2.
    c0: f64,
    ydelta: NodalField,
}

/// The assembled relaxation: geometry plus the rows generated by a bounds
/// profile. Immutable once built; rebuilding with a new profile shares the
/// geometry.
#[derive(Debug)]
pub struct RelaxationModel {
    geom: Arc<Geometry>,
    profile: BoundsProfile,
    mcc_rows: Vec<LinRow>,
    state_rows: Vec<LinRow>,
}

/// Minimizer of the relaxation.
#[derive(Debug, Clone)]
pub struct RelaxationSolution {
    pub u: NodalField,
    pub w: CellField,
    pub z: Vec<f64>,
    /// Optimal value of the squared-misfit objective 1/2 ||u - ydelta||^2.
    pub objective: f64,
    /// Relaxation lower bound in unsquared norm units: sqrt(2 * objective).
    pub m_mcc: f64,
    pub status: Status,
    pub iterations: usize,
}

/// Worst constraint violation of a candidate point, with its location.
#[derive(Debug, Clone)]
pub struct Residual {
    pub max_violation: f64,
    pub location: String,
}

pub fn build_relaxation(
    pd: &ProblemData,
    triple: &GridTriple,
    profile: &BoundsProfile,
    ydelta: &NodalField,
) -> Result<RelaxationModel, RelaxError> {
    profile.check_dims(triple)?;
    check_z_current(profile, triple)?;
    if ydelta.grid != triple.sim {
        return Err(RelaxError::Dimension("data grid != simulation grid".into()));
    }
    let geom = Arc::new(build_geometry(pd, triple, ydelta)?);
    Ok(assemble_rows(geom, profile.clone()))
}

// The derived interval product is the tightest sound product box; anything
// tighter would cut lifted points, so reject it as stale. Wider is sound
// and allowed.
fn check_z_current(profile: &BoundsProfile, triple: &GridTriple) -> Result<(), RelaxError> {
    let mut fresh = profile.clone();
    fresh.derive_z_bounds(triple);
    for i in 0..profile.z_lo.len() {
        let scale = 1.0 + fresh.z_lo[i].abs() + fresh.z_hi[i].abs();
        if profile.z_lo[i] > fresh.z_lo[i] + 1e-9 * scale
            || profile.z_hi[i] < fresh.z_hi[i] - 1e-9 * scale
        {
            return Err(RelaxError::StaleZBounds { cell: i });
        }
    }
    Ok(())
}

fn build_geometry(
    pd: &ProblemData,
    triple: &GridTriple,
    ydelta: &NodalField,
) -> Result<Geometry, RelaxError> {
    let sim = &triple.sim;
    let n_nodes = sim.n_nodes();
    let k_lu = stiffness_interior(sim).factor()?;
    let full = |interior: Vec<f64>| {
        let mut v = vec![0.0; n_nodes];
        v[1..n_nodes - 1].copy_from_slice(&interior);
        v
    };
    let u0 = full(k_lu.solve(&load_interior(sim, &pd.f1)));
    let loads = averaged_loads(pd, triple);
    let w_cols: Vec<Vec<f64>> = loads.iter().map(|g| full(k_lu.solve(g))).collect();

    let weights = cell_average_weights(&triple.tau, sim);
    let n_tau = triple.n_tau();
    let avg_u0: Vec<f64> = (0..n_tau).map(|i| weights.average(i, &u0)).collect();
    let avg_w: Vec<Vec<f64>> = (0..n_tau)
        .map(|i| w_cols.iter().map(|col| weights.average(i, col)).collect())
        .collect();

    let m = mass_full(sim);
    let m_w: Vec<Vec<f64>> = w_cols.iter().map(|col| m.mat_vec(col)).collect();
    let mut q_z = vec![vec![0.0; n_tau]; n_tau];
    for k in 0..n_tau {
        for l in 0..=k {
            let v: f64 = w_cols[k].iter().zip(&m_w[l]).map(|(a, b)| a * b).sum();
            q_z[k][l] = v;
            q_z[l][k] = v;
        }
    }
    let d0: Vec<f64> = u0.iter().zip(ydelta.values()).map(|(a, b)| a - b).collect();
    let q_lin: Vec<f64> = m_w
        .iter()
        .map(|mw| -mw.iter().zip(&d0).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let md0 = m.mat_vec(&d0);
    let c0 = 0.5 * d0.iter().zip(&md0).map(|(a, b)| a * b).sum::<f64>();

    Ok(Geometry {
        pd: pd.clone(),
        triple: triple.clone(),
        weights,
        u0,
        w_cols,
        avg_u0,
        avg_w,
        q_z,
        q_lin,
        c0,
        ydelta: ydelta.clone(),
    })
}

fn assemble_rows(geom: Arc<Geometry>, profile: BoundsProfile) -> RelaxationModel {
    let n_tau = geom.triple.n_tau();
    let n_h = geom.triple.n_h();
    let nv = n_h + n_tau;
    let mut mcc_rows = Vec::with_capacity(4 * n_tau);
    let mut state_rows = Vec::with_capacity(2 * n_tau);
    for i in 0..n_tau {
        let j = geom.triple.owner_of(i);
        let (ul, uh) = (profile.u_lo[i], profile.u_hi[i]);
        let (wl, wh) = (profile.w_lo[j], profile.w_hi[j]);
        let beta = &geom.avg_w[i]; // u_avg_i = avg_u0[i] - beta . z
        let a0 = geom.avg_u0[i];

        // (w-coefficient, u_avg-coefficient, z_i-coefficient, constant);
        // each row reads coeff_w * w_j + coeff_u * u_avg + coeff_z * z_i +
        // constant <= 0 and is expanded over the reduced variables.
        let specs = [
            (ul, wl, -1.0, -ul * wl),
            (uh, wh, -1.0, -uh * wh),
            (-uh, -wl, 1.0, uh * wl),
            (-ul, -wh, 1.0, ul * wh),
        ];
        for (cw, cu, cz, cst) in specs {
            let mut coeffs = vec![0.0; nv];
            coeffs[j] = cw;
            for k in 0..n_tau {
                coeffs[n_h + k] -= cu * beta[k];
            }
            coeffs[n_h + i] += cz;
            mcc_rows.push(LinRow {
                coeffs,
                rhs: -cst - cu * a0,
            });
        }

        // a_i' u <= u_hi and -a_i' u <= -u_lo over z.
        let mut up = vec![0.0; nv];
        let mut lo = vec![0.0; nv];
        for k in 0..n_tau {
            up[n_h + k] = -beta[k];
            lo[n_h + k] = beta[k];
        }
        state_rows.push(LinRow {
            coeffs: up,
            rhs: profile.u_hi[i] - a0,
        });
        state_rows.push(LinRow {
            coeffs: lo,
            rhs: a0 - profile.u_lo[i],
        });
    }
    RelaxationModel {
        geom,
        profile,
        mcc_rows,
        state_rows,
    }
}

impl RelaxationModel {
    /// Rebuild with a new bounds profile, sharing the geometry.
    pub fn with_profile(&self, profile: BoundsProfile) -> Result<RelaxationModel, RelaxError> {
        profile.check_dims(&self.geom.triple)?;
        check_z_current(&profile, &self.geom.triple)?;
        Ok(assemble_rows(self.geom.clone(), profile))
    }

    pub fn profile(&self) -> &BoundsProfile {
        &self.profile
    }

    pub fn triple(&self) -> &GridTriple {
        &self.geom.triple
    }

    pub fn problem_data(&self) -> &ProblemData {
        &self.geom.pd
    }

    pub fn ydelta(&self) -> &NodalField {
        &self.geom.ydelta
    }

    pub fn n_vars(&self) -> usize {
        self.geom.triple.n_h() + self.geom.triple.n_tau()
    }

    pub fn mcc_rows(&self) -> &[LinRow] {
        &self.mcc_rows
    }

    pub fn state_rows(&self) -> &[LinRow] {
        &self.state_rows
    }

    /// Boxes over the reduced variables [w..., z...].
    pub fn boxes(&self) -> (Vec<f64>, Vec<f64>) {
        let p = &self.profile;
        let lower: Vec<f64> = p.w_lo.iter().chain(&p.z_lo).copied().collect();
        let upper: Vec<f64> = p.w_hi.iter().chain(&p.z_hi).copied().collect();
        (lower, upper)
    }

    /// The averaged state as an affine function of the reduced variables:
    /// returns (constant, coefficient vector) with a_i' u = c + coeffs . v.
    pub fn average_affine(&self, i: usize) -> (f64, Vec<f64>) {
        let n_h = self.geom.triple.n_h();
        let n_tau = self.geom.triple.n_tau();
        let mut coeffs = vec![0.0; n_h + n_tau];
        for k in 0..n_tau {
            coeffs[n_h + k] = -self.geom.avg_w[i][k];
        }
        (self.geom.avg_u0[i], coeffs)
    }

    /// Constraint-only LP view (zero objective).
    pub fn constraint_lp(&self) -> LinearProgram {
        let (lower, upper) = self.boxes();
        let mut a_in = Vec::with_capacity(self.mcc_rows.len() + self.state_rows.len());
        let mut b_in = Vec::with_capacity(a_in.capacity());
        for row in self.mcc_rows.iter().chain(&self.state_rows) {
            a_in.push(row.coeffs.clone());
            b_in.push(row.rhs);
        }
        LinearProgram {
            objective: vec![0.0; self.n_vars()],
            a_eq: Vec::new(),
            b_eq: Vec::new(),
            a_in,
            b_in,
            lower,
            upper,
        }
    }

    /// Full quadratic program over the reduced variables.
    pub fn as_qp(&self) -> QuadraticProgram {
        let lp = self.constraint_lp();
        let n_h = self.geom.triple.n_h();
        let n_tau = self.geom.triple.n_tau();
        let nv = n_h + n_tau;
        let mut q = vec![vec![0.0; nv]; nv];
        for k in 0..n_tau {
            for l in 0..n_tau {
                q[n_h + k][n_h + l] = self.geom.q_z[k][l];
            }
        }
        let mut linear = vec![0.0; nv];
        linear[n_h..].copy_from_slice(&self.geom.q_lin);
        QuadraticProgram {
            q_matrix: q,
            linear,
            a_eq: lp.a_eq,
            b_eq: lp.b_eq,
            a_in: lp.a_in,
            b_in: lp.b_in,
            lower: lp.lower,
            upper: lp.upper,
        }
    }

    /// Plain-text dump of the reduced model (see the convex module for the
    /// row format).
    pub fn dump(&self) -> String {
        self.as_qp().dump()
    }

    /// Recover the nodal state determined by a product vector z.
    pub fn state_from_z(&self, z: &[f64]) -> NodalField {
        let mut u = self.geom.u0.clone();
        for (k, col) in self.geom.w_cols.iter().enumerate() {
            if z[k] != 0.0 {
                for (uv, cv) in u.iter_mut().zip(col) {
                    *uv -= z[k] * cv;
                }
            }
        }
        NodalField::new(self.geom.triple.sim.clone(), u).expect("state length")
    }

    /// Objective value 1/2 ||u(z) - ydelta||^2 as a function of z.
    pub fn objective_of_z(&self, z: &[f64]) -> f64 {
        let g = &self.geom;
        let mut val = g.c0;
        for k in 0..z.len() {
            val += g.q_lin[k] * z[k];
            let mut qz = 0.0;
            for l in 0..z.len() {
                qz += g.q_z[k][l] * z[l];
            }
            val += 0.5 * z[k] * qz;
        }
        val
    }

    /// Solve the relaxation; the reported bound is the square root of twice
    /// the quadratic optimum (the unsquared misfit value).
    ///
    /// The objective involves only the state block, so the coefficient part
    /// of the minimizer is generally a face, not a point. The returned `w`
    /// is a canonical selection from that face: the least-squares ratio of
    /// the product variables to the state averages on each cell, projected
    /// onto the interval the envelope rows leave open. It carries the same
    /// objective value as any other selection and stays feasible.
    pub fn solve(&self, tol: f64) -> Result<RelaxationSolution, RelaxError> {
        let qp = self.as_qp();
        let sol: Solution = solve_qp(&qp, tol)?;
        match sol.status {
            Status::Optimal => {}
            Status::Infeasible => return Err(RelaxError::ProfileInfeasible),
            s => return Err(RelaxError::KernelFailed(s)),
        }
        let n_h = self.geom.triple.n_h();
        let z = sol.x[n_h..].to_vec();
        let u = self.state_from_z(&z);
        let w_vals = self.extract_coefficient(&z, &sol.x[..n_h]);
        let w = CellField::new(self.geom.triple.h.clone(), w_vals)?;
        let objective = (sol.objective + self.geom.c0).max(0.0);
        Ok(RelaxationSolution {
            u,
            w,
            z,
            objective,
            m_mcc: (2.0 * objective).sqrt(),
            status: sol.status,
            iterations: sol.iterations,
        })
    }

    // Coefficient read-off from an optimal (z, implied u): per h-cell the
    // least-squares solution of u_avg_i * w = z_i over its tau-cells,
    // projected onto the interval the envelope rows leave open at the fixed
    // (u_avg, z). Falls back to the kernel's w where the state averages
    // carry no information.
    fn extract_coefficient(&self, z: &[f64], w_kernel: &[f64]) -> Vec<f64> {
        let g = &self.geom;
        let p = &self.profile;
        let n_h = g.triple.n_h();
        let mut lo = p.w_lo.clone();
        let mut hi = p.w_hi.clone();
        let mut num = vec![0.0; n_h];
        let mut den = vec![0.0; n_h];
        for i in 0..g.triple.n_tau() {
            let j = g.triple.owner_of(i);
            let mut u_avg = g.avg_u0[i];
            for k in 0..z.len() {
                u_avg -= g.avg_w[i][k] * z[k];
            }
            num[j] += u_avg * z[i];
            den[j] += u_avg * u_avg;
            // Each envelope row is linear in w at fixed (u_avg, z_i):
            // a * w <= b.
            let (ul, uh) = (p.u_lo[i], p.u_hi[i]);
            let (wl, wh) = (p.w_lo[j], p.w_hi[j]);
            let rows = [
                (ul, z[i] - wl * (u_avg - ul)),
                (uh, z[i] - wh * (u_avg - uh)),
                (-uh, wl * (u_avg - uh) - z[i]),
                (-ul, wh * (u_avg - ul) - z[i]),
            ];
            for (a, b) in rows {
                if a > 1e-12 {
                    hi[j] = hi[j].min(b / a);
                } else if a < -1e-12 {
                    lo[j] = lo[j].max(b / a);
                }
            }
        }
        (0..n_h)
            .map(|j| {
                let cand = if den[j] > 1e-16 {
                    num[j] / den[j]
                } else {
                    w_kernel[j]
                };
                if lo[j] <= hi[j] + 1e-9 {
                    cand.clamp(lo[j].min(hi[j]), hi[j].max(lo[j]))
                        .clamp(p.w_lo[j], p.w_hi[j])
                } else {
                    w_kernel[j].clamp(p.w_lo[j], p.w_hi[j])
                }
            })
            .collect()
    }

    /// Worst violation of a candidate (u, w, z) across the envelope rows,
    /// the product and coefficient boxes and the state-bound rows. The
    /// averaged state is recomputed from the nodal field, not from z.
    pub fn mcc_residual(&self, u: &NodalField, w: &CellField, z: &[f64]) -> Residual {
        let g = &self.geom;
        let p = &self.profile;
        let mut worst = Residual {
            max_violation: 0.0,
            location: "feasible".into(),
        };
        let mut push = |v: f64, loc: String| {
            if v > worst.max_violation {
                worst.max_violation = v;
                worst.location = loc;
            }
        };
        for i in 0..g.triple.n_tau() {
            let j = g.triple.owner_of(i);
            let u_avg = g.weights.average(i, u.values());
            let rows = mcc_row_values(
                u_avg,
                w.values[j],
                z[i],
                p.u_lo[i],
                p.u_hi[i],
                p.w_lo[j],
                p.w_hi[j],
            );
            for (r, v) in rows.iter().enumerate() {
                push(*v, format!("mcc row {r} of cell {i}"));
            }
            push(z[i] - p.z_hi[i], format!("z above upper bound in cell {i}"));
            push(p.z_lo[i] - z[i], format!("z below lower bound in cell {i}"));
            push(u_avg - p.u_hi[i], format!("state average above bound in cell {i}"));
            push(p.u_lo[i] - u_avg, format!("state average below bound in cell {i}"));
        }
        for j in 0..g.triple.n_h() {
            push(w.values[j] - p.w_hi[j], format!("w above upper bound in cell {j}"));
            push(p.w_lo[j] - w.values[j], format!("w below lower bound in cell {j}"));
        }
        worst
    }
}

/// Lift a coefficient into the relaxation: solve the averaged state
/// equation and set z to the product of the cell averages. Feasible for the
/// relaxation whenever the bounds profile is valid.
pub fn lifted_point(
    pd: &ProblemData,
    triple: &GridTriple,
    w: &CellField,
) -> Result<(NodalField, Vec<f64>), RelaxError> {
    let u = solve_state_averaged(pd, w, triple)?;
    let weights = cell_average_weights(&triple.tau, &triple.sim);
    let z: Vec<f64> = (0..triple.n_tau())
        .map(|i| weights.average(i, u.values()) * w.values[triple.owner_of(i)])
        .collect();
    Ok((u, z))
}

/// Convenience wrapper: build and solve in one call with the default
/// kernel tolerance.
pub fn solve_relaxation(
    pd: &ProblemData,
    triple: &GridTriple,
    profile: &BoundsProfile,
    ydelta: &NodalField,
) -> Result<RelaxationSolution, RelaxError> {
    build_relaxation(pd, triple, profile, ydelta)?.solve(DEFAULT_TOL)
}

/// Check that the relaxation really lower-bounds the discretized problem at
/// a given coefficient: misfit of the plain state solve minus the bound.
pub fn dominance_gap(
    pd: &ProblemData,
    triple: &GridTriple,
    w: &CellField,
    ydelta: &NodalField,
    m_mcc: f64,
) -> Result<f64, RelaxError> {
    let u = crate::fem::solve_state(pd, w, &triple.sim)?;
    Ok(misfit(&u, ydelta)? - m_mcc)
}
