//! First-order finite elements for the state equation `-u'' + f0*u*w = f1`
//! on (0,1) with homogeneous Dirichlet boundary, its locally averaged
//! variant, the L2 misfit, and the adjoint gradient of the squared misfit.
//!
//! Assembly conventions: `f0` and `f1` are integrated per element with the
//! 4-point Gauss rule; reaction terms with a piecewise-constant coefficient
//! are integrated on the merged breakpoint set of the simulation grid and
//! the coefficient grid, so no quadrature crime is committed against the
//! jumps of `w`.

use crate::linalg::{BandLu, BandMatrix, LinalgError};
use crate::mesh::{
    cell_average_weights, merge_breakpoints, AveragingWeights, CellField, Grid, GridTriple,
    MeshError,
};
use crate::quad::GaussRule;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FemError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("assembled system residual {residual:.3e} exceeds tolerance")]
    ResidualTooLarge { residual: f64 },
}

/// A real-valued function on (0,1), shareable across threads.
#[derive(Clone)]
pub struct ScalarFn(Arc<dyn Fn(f64) -> f64 + Send + Sync>);

impl ScalarFn {
    pub fn new<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        ScalarFn(Arc::new(f))
    }

    pub fn constant(c: f64) -> Self {
        ScalarFn(Arc::new(move |_| c))
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        (self.0)(x)
    }
}

impl fmt::Debug for ScalarFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScalarFn(<fn>)")
    }
}

/// Data of the state equation plus the coefficient box and the regularity
/// exponent consumed by the balancing rule.
#[derive(Debug, Clone)]
pub struct ProblemData {
    pub f0: ScalarFn,
    pub f1: ScalarFn,
    /// Global coefficient bounds (w_lo, w_hi).
    pub w_box: (f64, f64),
    /// Regularity exponent in (0, 1]; only the balancing rule reads it.
    pub s: f64,
}

impl ProblemData {
    /// The benchmark configuration: f0 = 36, f1 = 50 sin(2 pi x)^2,
    /// coefficient box [0, 1], s = 1.
    pub fn benchmark() -> Self {
        ProblemData {
            f0: ScalarFn::constant(36.0),
            f1: ScalarFn::new(|x| 50.0 * (2.0 * std::f64::consts::PI * x).sin().powi(2)),
            w_box: (0.0, 1.0),
            s: 1.0,
        }
    }
}

/// Continuous piecewise-linear field on the simulation grid; boundary nodes
/// are pinned to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalField {
    pub grid: Grid,
    values: Vec<f64>,
}

impl NodalField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self, FemError> {
        if values.len() != grid.n_nodes() {
            return Err(MeshError::LengthMismatch {
                expected: grid.n_nodes(),
                actual: values.len(),
            }
            .into());
        }
        let mut values = values;
        values[0] = 0.0;
        let last = values.len() - 1;
        values[last] = 0.0;
        Ok(NodalField { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        let values = vec![0.0; grid.n_nodes()];
        NodalField { grid, values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Piecewise-linear evaluation.
    pub fn eval(&self, x: f64) -> f64 {
        let k = self.grid.cell_of(x);
        let theta = (x - self.grid.breakpoints()[k]) / self.grid.width();
        self.values[k] * (1.0 - theta) + self.values[k + 1] * theta
    }

    fn from_interior(grid: Grid, interior: &[f64]) -> Self {
        let mut values = vec![0.0; grid.n_nodes()];
        values[1..grid.n_cells()].copy_from_slice(interior);
        NodalField { grid, values }
    }
}

/// Stiffness matrix over interior nodes (tridiagonal).
pub fn stiffness_interior(sim: &Grid) -> BandMatrix {
    let n = sim.n_cells() - 1;
    let h = sim.width();
    let mut k = BandMatrix::zeros(n, 1, 1);
    for i in 0..n {
        k.add(i, i, 2.0 / h).unwrap();
        if i + 1 < n {
            k.add(i, i + 1, -1.0 / h).unwrap();
            k.add(i + 1, i, -1.0 / h).unwrap();
        }
    }
    k
}

/// Mass matrix over all nodes (tridiagonal).
pub fn mass_full(sim: &Grid) -> BandMatrix {
    let n = sim.n_nodes();
    let h = sim.width();
    let mut m = BandMatrix::zeros(n, 1, 1);
    for cell in 0..sim.n_cells() {
        m.add(cell, cell, h / 3.0).unwrap();
        m.add(cell + 1, cell + 1, h / 3.0).unwrap();
        m.add(cell, cell + 1, h / 6.0).unwrap();
        m.add(cell + 1, cell, h / 6.0).unwrap();
    }
    m
}

/// Consistent L2 norm of a nodal vector: sqrt(v' M v).
pub fn mass_norm(sim: &Grid, v: &[f64]) -> f64 {
    let m = mass_full(sim);
    let mv = m.mat_vec(v);
    v.iter().zip(&mv).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt()
}

/// Interior load vector of `f` (4-point Gauss per element).
pub fn load_interior(sim: &Grid, f: &ScalarFn) -> Vec<f64> {
    let rule = GaussRule::new(4);
    let n_int = sim.n_cells() - 1;
    let h = sim.width();
    let mut load = vec![0.0; n_int];
    for cell in 0..sim.n_cells() {
        let (a, b) = sim.cell(cell);
        for (x, wt) in rule.mapped(a, b) {
            let theta = (x - a) / h;
            let fv = f.eval(x);
            if cell >= 1 {
                load[cell - 1] += wt * fv * (1.0 - theta);
            }
            if cell + 1 <= n_int {
                load[cell] += wt * fv * theta;
            }
        }
    }
    load
}

// Reaction matrix over interior nodes for a coefficient given per segment:
// `segments` yields (a, b, sim_cell, coefficient value is read through
// `coeff(mid)`), integrated by 4-point Gauss.
fn reaction_interior<F: Fn(f64) -> f64>(
    sim: &Grid,
    f0: &ScalarFn,
    segments: &[(f64, f64)],
    coeff: F,
) -> BandMatrix {
    let rule = GaussRule::new(4);
    let n_int = sim.n_cells() - 1;
    let h = sim.width();
    let mut r = BandMatrix::zeros(n_int, 1, 1);
    for &(a, b) in segments {
        if b - a < 1e-15 {
            continue;
        }
        let mid = 0.5 * (a + b);
        let cell = sim.cell_of(mid);
        let w_val = coeff(mid);
        if w_val == 0.0 {
            continue;
        }
        let left = sim.breakpoints()[cell];
        for (x, wt) in rule.mapped(a, b) {
            let theta = (x - left) / h;
            let c = wt * f0.eval(x) * w_val;
            let phi = [1.0 - theta, theta];
            // Local nodes are cell and cell+1; interior indices shift by 1.
            for (li, node) in [cell, cell + 1].into_iter().enumerate() {
                if node == 0 || node == sim.n_cells() {
                    continue;
                }
                for (lj, node_j) in [cell, cell + 1].into_iter().enumerate() {
                    if node_j == 0 || node_j == sim.n_cells() {
                        continue;
                    }
                    r.add(node - 1, node_j - 1, c * phi[li] * phi[lj]).unwrap();
                }
            }
        }
    }
    r
}

fn segments_of(sim: &Grid, other: &Grid) -> Vec<(f64, f64)> {
    let merged = merge_breakpoints(sim.breakpoints(), other.breakpoints());
    merged.windows(2).map(|s| (s[0], s[1])).collect()
}

fn solve_interior_system(
    sim: &Grid,
    system: BandMatrix,
    rhs: &[f64],
) -> Result<NodalField, FemError> {
    let rhs_norm = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let lu = system.clone().factor()?;
    let x = lu.solve(rhs);
    let res = system.mat_vec(&x);
    let mut worst = 0.0f64;
    for (r, b) in res.iter().zip(rhs) {
        worst = worst.max((r - b).abs());
    }
    if worst > 1e-10 * rhs_norm {
        return Err(FemError::ResidualTooLarge {
            residual: worst / rhs_norm,
        });
    }
    Ok(NodalField::from_interior(sim.clone(), &x))
}

/// Solve `-u'' + f0*u*w = f1` for a piecewise-constant coefficient `w`.
pub fn solve_state(pd: &ProblemData, w: &CellField, sim: &Grid) -> Result<NodalField, FemError> {
    let segments = segments_of(sim, &w.grid);
    let mut system = stiffness_interior(sim);
    let reaction = reaction_interior(sim, &pd.f0, &segments, |x| w.eval(x));
    for i in 0..system.n() {
        for j in i.saturating_sub(1)..=(i + 1).min(system.n() - 1) {
            system.add(i, j, reaction.get(i, j)).unwrap();
        }
    }
    let rhs = load_interior(sim, &pd.f1);
    solve_interior_system(sim, system, &rhs)
}

/// Solve the state equation for a continuous coefficient, integrated per
/// element by the same Gauss rule as the rest of the assembly.
pub fn solve_state_with(
    pd: &ProblemData,
    coeff: &ScalarFn,
    sim: &Grid,
) -> Result<NodalField, FemError> {
    let segments: Vec<(f64, f64)> = (0..sim.n_cells()).map(|c| sim.cell(c)).collect();
    let mut system = stiffness_interior(sim);
    let f0 = pd.f0.clone();
    let c = coeff.clone();
    // Fold the continuous coefficient into f0 so each Gauss point sees
    // f0(x) * w(x) exactly.
    let merged = ScalarFn::new(move |x| f0.eval(x) * c.eval(x));
    let reaction = reaction_interior(sim, &merged, &segments, |_| 1.0);
    for i in 0..system.n() {
        for j in i.saturating_sub(1)..=(i + 1).min(system.n() - 1) {
            system.add(i, j, reaction.get(i, j)).unwrap();
        }
    }
    let rhs = load_interior(sim, &pd.f1);
    solve_interior_system(sim, system, &rhs)
}

/// Load vectors of `f0` restricted to each tau-cell: g_i[k] = integral of
/// f0 * phi_k over tau-cell i (interior nodes only).
pub fn averaged_loads(pd: &ProblemData, triple: &GridTriple) -> Vec<Vec<f64>> {
    let sim = &triple.sim;
    let rule = GaussRule::new(4);
    let n_int = sim.n_cells() - 1;
    let h = sim.width();
    let merged = merge_breakpoints(sim.breakpoints(), triple.tau.breakpoints());
    let mut out = vec![vec![0.0; n_int]; triple.n_tau()];
    for seg in merged.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        if b - a < 1e-15 {
            continue;
        }
        let mid = 0.5 * (a + b);
        let i_tau = triple.tau.cell_of(mid);
        let cell = sim.cell_of(mid);
        let left = sim.breakpoints()[cell];
        for (x, wt) in rule.mapped(a, b) {
            let theta = (x - left) / h;
            let c = wt * pd.f0.eval(x);
            if cell >= 1 {
                out[i_tau][cell - 1] += c * (1.0 - theta);
            }
            if cell + 1 <= n_int {
                out[i_tau][cell] += c * theta;
            }
        }
    }
    out
}

/// Solve the locally averaged state equation
/// `-u'' + f0 * (P_tau u)(P_tau w) = f1`.
pub fn solve_state_averaged(
    pd: &ProblemData,
    w: &CellField,
    triple: &GridTriple,
) -> Result<NodalField, FemError> {
    let sim = &triple.sim;
    let n_int = sim.n_cells() - 1;
    let weights = cell_average_weights(&triple.tau, sim);
    let loads = averaged_loads(pd, triple);
    // P_tau w is constant per tau-cell: the owning h-cell value.
    let w_tau: Vec<f64> = (0..triple.n_tau())
        .map(|i| w.values[triple.owner_of(i)])
        .collect();

    // The averaging weight rows live on all nodes; restrict to interior.
    let a_rows: Vec<Vec<f64>> = (0..triple.n_tau())
        .map(|i| {
            let full = weights.row_dense(i);
            full[1..sim.n_cells()].to_vec()
        })
        .collect();
    // Bandwidth: widest node span of a single tau-cell coupling block.
    let spans: Vec<(usize, usize)> = (0..triple.n_tau())
        .map(|i| {
            let mut lo = usize::MAX;
            let mut hi = 0usize;
            for v in [&loads[i], &a_rows[i]] {
                for (k, &val) in v.iter().enumerate() {
                    if val != 0.0 {
                        lo = lo.min(k);
                        hi = hi.max(k);
                    }
                }
            }
            (lo.min(hi), hi)
        })
        .collect();
    let mut band = 1usize;
    for &(lo, hi) in &spans {
        band = band.max(hi - lo);
    }

    let mut system = BandMatrix::zeros(n_int, band, band);
    let stiff = stiffness_interior(sim);
    for i in 0..n_int {
        for j in i.saturating_sub(1)..=(i + 1).min(n_int - 1) {
            system.add(i, j, stiff.get(i, j)).unwrap();
        }
    }
    for i in 0..triple.n_tau() {
        if w_tau[i] == 0.0 {
            continue;
        }
        let (lo, hi) = spans[i];
        for r in lo..=hi {
            let gv = loads[i][r];
            if gv == 0.0 {
                continue;
            }
            for c in lo..=hi {
                let av = a_rows[i][c];
                if av != 0.0 {
                    system.add(r, c, w_tau[i] * gv * av)?;
                }
            }
        }
    }
    let rhs = load_interior(sim, &pd.f1);
    solve_interior_system(sim, system, &rhs)
}

/// Consistent L2 distance sqrt((u-y)' M (u-y)).
pub fn misfit(u: &NodalField, y: &NodalField) -> Result<f64, FemError> {
    if u.grid != y.grid {
        return Err(FemError::GridMismatch);
    }
    let diff: Vec<f64> = u.values.iter().zip(&y.values).map(|(a, b)| a - b).collect();
    Ok(mass_norm(&u.grid, &diff))
}

/// Gradient of J(w) = 1/2 || u(w) - y ||^2 with respect to the per-cell
/// values of `w`: solve the state, solve the adjoint with right-hand side
/// M (u - y), then integrate -f0 * u * p over each coefficient cell with
/// the assembly quadrature.
pub fn adjoint_gradient(
    pd: &ProblemData,
    w: &CellField,
    y: &NodalField,
    sim: &Grid,
) -> Result<CellField, FemError> {
    let (grad, _, _) = adjoint_gradient_with_state(pd, w, y, sim)?;
    Ok(grad)
}

/// Like [`adjoint_gradient`] but also returns the state and the objective
/// value 1/2 * misfit^2, reusing one factorization for both solves.
pub fn adjoint_gradient_with_state(
    pd: &ProblemData,
    w: &CellField,
    y: &NodalField,
    sim: &Grid,
) -> Result<(CellField, NodalField, f64), FemError> {
    if *sim != y.grid {
        return Err(FemError::GridMismatch);
    }
    let segments = segments_of(sim, &w.grid);
    let mut system = stiffness_interior(sim);
    let reaction = reaction_interior(sim, &pd.f0, &segments, |x| w.eval(x));
    for i in 0..system.n() {
        for j in i.saturating_sub(1)..=(i + 1).min(system.n() - 1) {
            system.add(i, j, reaction.get(i, j)).unwrap();
        }
    }
    let lu: BandLu = system.factor()?;
    let rhs = load_interior(sim, &pd.f1);
    let u_int = lu.solve(&rhs);
    let u = NodalField::from_interior(sim.clone(), &u_int);

    let diff: Vec<f64> = u.values.iter().zip(y.values()).map(|(a, b)| a - b).collect();
    let m = mass_full(sim);
    let mdiff = m.mat_vec(&diff);
    let p_int = lu.solve(&mdiff[1..sim.n_cells()]);
    let p = NodalField::from_interior(sim.clone(), &p_int);

    let rule = GaussRule::new(4);
    let mut grad = vec![0.0; w.grid.n_cells()];
    for &(a, b) in &segments {
        if b - a < 1e-15 {
            continue;
        }
        let mid = 0.5 * (a + b);
        let j = w.grid.cell_of(mid);
        for (x, wt) in rule.mapped(a, b) {
            grad[j] -= wt * pd.f0.eval(x) * u.eval(x) * p.eval(x);
        }
    }
    let objective = 0.5
        * diff
            .iter()
            .zip(&m.mat_vec(&diff))
            .map(|(a, b)| a * b)
            .sum::<f64>();
    Ok((CellField::new(w.grid.clone(), grad)?, u, objective))
}

/// Cell averages of a nodal field on the tau grid (helper shared by the
/// relaxation and the harness).
pub fn tau_averages(triple: &GridTriple, u: &NodalField) -> Vec<f64> {
    let weights: AveragingWeights = cell_average_weights(&triple.tau, &triple.sim);
    weights.apply(u.values())
}
