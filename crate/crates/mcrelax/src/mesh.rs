//! Uniform partitions of (0,1), grid nesting, cell-average projections and
//! the total-variation seminorm of piecewise-constant fields.
//!
//! Three grids appear throughout: the simulation grid carrying the
//! finite-element state, a coarse grid for the unknown coefficient, and an
//! intermediate grid on which the bilinear term is averaged. The coefficient
//! grid must be a union of cells of the averaging grid; the simulation grid
//! is independent of both (integrals against it are taken over the merged
//! breakpoint set, so the cell counts need not divide each other).

use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("grid must have at least one cell")]
    EmptyGrid,
    #[error("embedding violated: coarse breakpoint {breakpoint} has no matching fine breakpoint")]
    EmbeddingViolated { breakpoint: f64 },
    #[error("field defined on a {expected}-cell grid, got {actual} values")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("fields live on different grids")]
    GridMismatch,
}

/// A uniform partition of (0,1) into `n_cells` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    n_cells: usize,
    breakpoints: Vec<f64>,
}

impl Grid {
    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_nodes(&self) -> usize {
        self.n_cells + 1
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Uniform cell width.
    pub fn width(&self) -> f64 {
        1.0 / self.n_cells as f64
    }

    /// Cell interval [left, right).
    pub fn cell(&self, i: usize) -> (f64, f64) {
        (self.breakpoints[i], self.breakpoints[i + 1])
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        0.5 * (self.breakpoints[i] + self.breakpoints[i + 1])
    }

    /// Index of the cell containing `x` (clamped to the boundary cells).
    pub fn cell_of(&self, x: f64) -> usize {
        let idx = (x * self.n_cells as f64).floor() as isize;
        idx.clamp(0, self.n_cells as isize - 1) as usize
    }
}

/// Uniform partition with breakpoints i/n.
pub fn uniform_grid(n: usize) -> Result<Grid, MeshError> {
    if n == 0 {
        return Err(MeshError::EmptyGrid);
    }
    let breakpoints = (0..=n).map(|i| i as f64 / n as f64).collect();
    Ok(Grid {
        n_cells: n,
        breakpoints,
    })
}

/// For each coarse cell, the contiguous run of fine cells whose union equals
/// it within `tol`. Fails with the first coarse breakpoint that has no
/// counterpart in the fine grid.
pub fn check_embedding(coarse: &Grid, fine: &Grid, tol: f64) -> Result<Vec<Range<usize>>, MeshError> {
    let mut map = Vec::with_capacity(coarse.n_cells());
    let mut fine_pos = 0usize;
    for j in 0..coarse.n_cells() {
        let (_, right) = coarse.cell(j);
        let start = fine_pos;
        while fine_pos < fine.n_cells() && fine.breakpoints[fine_pos + 1] < right - tol {
            fine_pos += 1;
        }
        if fine_pos >= fine.n_cells() || (fine.breakpoints[fine_pos + 1] - right).abs() > tol {
            return Err(MeshError::EmbeddingViolated { breakpoint: right });
        }
        fine_pos += 1;
        map.push(start..fine_pos);
    }
    Ok(map)
}

/// Default embedding tolerance: breakpoints are rationals evaluated in
/// floating point, so allow slack relative to the smallest cell.
pub fn embedding_tol(coarse: &Grid, fine: &Grid) -> f64 {
    1e-12 * coarse.width().min(fine.width())
}

/// The nested grid triple: simulation grid, averaging grid (tau) and
/// coefficient grid (h), with the h-into-tau embedding map.
#[derive(Debug, Clone)]
pub struct GridTriple {
    pub sim: Grid,
    pub tau: Grid,
    pub h: Grid,
    /// For each h-cell, the contiguous range of tau-cells it is a union of.
    pub embedding_map: Vec<Range<usize>>,
    /// For each tau-cell, the h-cell containing it.
    owner: Vec<usize>,
}

impl GridTriple {
    pub fn new(sim: Grid, tau: Grid, h: Grid) -> Result<Self, MeshError> {
        let tol = embedding_tol(&h, &tau);
        let embedding_map = check_embedding(&h, &tau, tol)?;
        let mut owner = vec![0usize; tau.n_cells()];
        for (j, range) in embedding_map.iter().enumerate() {
            for slot in &mut owner[range.clone()] {
                *slot = j;
            }
        }
        Ok(GridTriple {
            sim,
            tau,
            h,
            embedding_map,
            owner,
        })
    }

    /// Build from cell counts; `n_tau` must be a multiple of `n_h`.
    pub fn from_counts(n_sim: usize, n_tau: usize, n_h: usize) -> Result<Self, MeshError> {
        Self::new(uniform_grid(n_sim)?, uniform_grid(n_tau)?, uniform_grid(n_h)?)
    }

    /// The h-cell containing tau-cell `i`.
    pub fn owner_of(&self, i: usize) -> usize {
        self.owner[i]
    }

    pub fn n_tau(&self) -> usize {
        self.tau.n_cells()
    }

    pub fn n_h(&self) -> usize {
        self.h.n_cells()
    }
}

/// A piecewise-constant field: one value per cell of its grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CellField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl CellField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self, MeshError> {
        if values.len() != grid.n_cells() {
            return Err(MeshError::LengthMismatch {
                expected: grid.n_cells(),
                actual: values.len(),
            });
        }
        Ok(CellField { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        let values = vec![value; grid.n_cells()];
        CellField { grid, values }
    }

    /// Evaluate at a point (left-closed cells).
    pub fn eval(&self, x: f64) -> f64 {
        self.values[self.grid.cell_of(x)]
    }
}

/// Merge two sorted breakpoint lists, dropping near-duplicates.
pub fn merge_breakpoints(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => {
                if x <= y {
                    i += 1;
                    if (x - y).abs() < 1e-14 {
                        j += 1;
                    }
                    x
                } else {
                    j += 1;
                    y
                }
            }
            (Some(&x), None) => {
                i += 1;
                x
            }
            (None, Some(&y)) => {
                j += 1;
                y
            }
            (None, None) => unreachable!(),
        };
        if out.last().map_or(true, |&last: &f64| next - last > 1e-14) {
            out.push(next);
        }
    }
    out
}

/// Row-sparse weights turning nodal values on `sim` into exact cell averages
/// on `tau`: row i applied to the nodal vector of a continuous piecewise
/// linear function equals its mean over tau-cell i. Built by exact
/// trapezoidal integration over the merged breakpoint set.
#[derive(Debug, Clone)]
pub struct AveragingWeights {
    rows: Vec<Vec<(usize, f64)>>,
    n_nodes: usize,
}

pub fn cell_average_weights(tau: &Grid, sim: &Grid) -> AveragingWeights {
    let merged = merge_breakpoints(tau.breakpoints(), sim.breakpoints());
    let n_nodes = sim.n_nodes();
    let sim_w = sim.width();
    let mut dense = vec![0.0f64; n_nodes];
    let mut out = Vec::with_capacity(tau.n_cells());
    let mut seg = 0usize;
    for i in 0..tau.n_cells() {
        let (left, right) = tau.cell(i);
        dense.iter_mut().for_each(|v| *v = 0.0);
        while seg + 1 < merged.len() && merged[seg + 1] <= right + 1e-13 {
            let (a, b) = (merged[seg], merged[seg + 1]);
            seg += 1;
            // Trapezoid over [a,b] is exact: the integrand is linear there.
            // u at a sample point on sim-cell k is a convex combination of
            // nodes k and k+1; sampling just inside the segment keeps the
            // cell lookup away from the shared breakpoint.
            let len = b - a;
            let mid = 0.5 * (a + b);
            let k = sim.cell_of(mid);
            for (x, half) in [(a, 0.5 * len), (b, 0.5 * len)] {
                let theta = (x - sim.breakpoints()[k]) / sim_w;
                dense[k] += half * (1.0 - theta);
                dense[k + 1] += half * theta;
            }
        }
        let inv_len = 1.0 / (right - left);
        let row: Vec<(usize, f64)> = dense
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(k, &v)| (k, v * inv_len))
            .collect();
        out.push(row);
    }
    AveragingWeights {
        rows: out,
        n_nodes,
    }
}

impl AveragingWeights {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Single cell average a_i' u.
    pub fn average(&self, i: usize, nodal: &[f64]) -> f64 {
        self.rows[i].iter().map(|&(k, w)| w * nodal[k]).sum()
    }

    /// All cell averages of a nodal vector.
    pub fn apply(&self, nodal: &[f64]) -> Vec<f64> {
        (0..self.rows.len()).map(|i| self.average(i, nodal)).collect()
    }

    /// Dense copy of row i.
    pub fn row_dense(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_nodes];
        for &(k, w) in &self.rows[i] {
            out[k] = w;
        }
        out
    }
}

/// L2 projection of a piecewise-constant field onto another grid: the
/// length-weighted average over intersections. Under embedding this copies
/// the containing cell's value.
pub fn project_pc(w: &CellField, target: &Grid) -> CellField {
    let merged = merge_breakpoints(w.grid.breakpoints(), target.breakpoints());
    let mut sums = vec![0.0f64; target.n_cells()];
    for seg in merged.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let mid = 0.5 * (a + b);
        let t = target.cell_of(mid);
        sums[t] += (b - a) * w.eval(mid);
    }
    let width = target.width();
    let values = sums.iter().map(|s| s / width).collect();
    CellField {
        grid: target.clone(),
        values,
    }
}

/// Sum of absolute jumps across interior breakpoints.
pub fn tv_seminorm(w: &CellField) -> f64 {
    w.values.windows(2).map(|p| (p[1] - p[0]).abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_grid_breakpoints() {
        assert_eq!(uniform_grid(1).unwrap().breakpoints(), &[0.0, 1.0]);
        assert_eq!(
            uniform_grid(4).unwrap().breakpoints(),
            &[0.0, 0.25, 0.5, 0.75, 1.0]
        );
        let g = uniform_grid(3).unwrap();
        for i in 0..3 {
            let (a, b) = g.cell(i);
            assert!((b - a - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(uniform_grid(0).is_err());
    }

    #[test]
    fn embedding_dyadic_and_identity() {
        let c2 = uniform_grid(2).unwrap();
        let f4 = uniform_grid(4).unwrap();
        let map = check_embedding(&c2, &f4, 1e-12).unwrap();
        assert_eq!(map, vec![0..2, 2..4]);

        let g3 = uniform_grid(3).unwrap();
        let map = check_embedding(&g3, &g3, 1e-12).unwrap();
        assert_eq!(map, vec![0..1, 1..2, 2..3]);
    }

    #[test]
    fn embedding_failure_names_breakpoint() {
        let c2 = uniform_grid(2).unwrap();
        let f3 = uniform_grid(3).unwrap();
        match check_embedding(&c2, &f3, 1e-12) {
            Err(MeshError::EmbeddingViolated { breakpoint }) => {
                assert!((breakpoint - 0.5).abs() < 1e-15);
            }
            other => panic!("expected embedding violation, got {other:?}"),
        }
    }

    #[test]
    fn averages_preserve_constants() {
        let sim = uniform_grid(17).unwrap();
        let tau = uniform_grid(5).unwrap();
        let weights = cell_average_weights(&tau, &sim);
        let nodal = vec![3.25; sim.n_nodes()];
        for avg in weights.apply(&nodal) {
            assert!((avg - 3.25).abs() < 1e-13);
        }
    }

    #[test]
    fn average_of_hat_function() {
        let sim = uniform_grid(2).unwrap();
        let tau = uniform_grid(2).unwrap();
        let weights = cell_average_weights(&tau, &sim);
        let avgs = weights.apply(&[0.0, 1.0, 0.0]);
        assert!((avgs[0] - 0.5).abs() < 1e-14);
        assert!((avgs[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn weight_rows_nonnegative_and_affine() {
        let sim = uniform_grid(64).unwrap();
        let tau = uniform_grid(7).unwrap();
        let weights = cell_average_weights(&tau, &sim);
        for i in 0..weights.n_rows() {
            let mut sum = 0.0;
            for &(_, w) in weights.row(i) {
                assert!(w >= -1e-15);
                sum += w;
            }
            assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
        }
        // Exact cell means of an affine function: alpha * midpoint + beta.
        let (alpha, beta) = (2.5, -0.7);
        let nodal: Vec<f64> = sim
            .breakpoints()
            .iter()
            .map(|&x| alpha * x + beta)
            .collect();
        let avgs = weights.apply(&nodal);
        for i in 0..tau.n_cells() {
            let expect = alpha * tau.midpoint(i) + beta;
            assert!((avgs[i] - expect).abs() < 1e-12);
        }
    }

    // Oracle: composite trapezoid on the merged breakpoints, each segment
    // split 100x. Exact for piecewise-linear integrands since every kink is
    // a sample point.
    fn average_oracle(tau: &Grid, sim: &Grid, nodal: &[f64], cell: usize) -> f64 {
        let eval = |x: f64| {
            let k = sim.cell_of(x);
            let theta = (x - sim.breakpoints()[k]) / sim.width();
            nodal[k] * (1.0 - theta) + nodal[k + 1] * theta
        };
        let merged = merge_breakpoints(tau.breakpoints(), sim.breakpoints());
        let (left, right) = tau.cell(cell);
        let mut acc = 0.0;
        for seg in merged.windows(2) {
            if seg[0] < left - 1e-13 || seg[1] > right + 1e-13 {
                continue;
            }
            let n_sub = 100;
            let dx = (seg[1] - seg[0]) / n_sub as f64;
            for s in 0..n_sub {
                let a = seg[0] + s as f64 * dx;
                acc += 0.5 * dx * (eval(a) + eval(a + dx));
            }
        }
        acc / (right - left)
    }

    #[test]
    fn random_field_matches_quadrature_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sim = uniform_grid(1024).unwrap();
        let tau = uniform_grid(7).unwrap();
        let nodal: Vec<f64> = (0..sim.n_nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weights = cell_average_weights(&tau, &sim);
        for i in 0..7 {
            let fast = weights.average(i, &nodal);
            let slow = average_oracle(&tau, &sim, &nodal, i);
            assert!((fast - slow).abs() < 1e-12, "cell {i}: {fast} vs {slow}");
        }
    }

    #[test]
    fn project_pc_identity_and_embedding() {
        let h = uniform_grid(2).unwrap();
        let w = CellField::new(h.clone(), vec![1.0, 3.0]).unwrap();
        let same = project_pc(&w, &h);
        assert_eq!(same.values, vec![1.0, 3.0]);

        let tau = uniform_grid(4).unwrap();
        let fine = project_pc(&w, &tau);
        assert_eq!(fine.values, vec![1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn project_pc_straddling_cell() {
        let h = uniform_grid(2).unwrap();
        let w = CellField::new(h, vec![1.0, 3.0]).unwrap();
        let tau = uniform_grid(3).unwrap();
        let p = project_pc(&w, &tau);
        assert!((p.values[0] - 1.0).abs() < 1e-14);
        assert!((p.values[1] - 2.0).abs() < 1e-14);
        assert!((p.values[2] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn project_pc_idempotent_and_recovers_under_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = uniform_grid(5).unwrap();
        let tau = uniform_grid(15).unwrap();
        let values: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
        let w = CellField::new(h.clone(), values.clone()).unwrap();
        let p = project_pc(&w, &tau);
        let pp = project_pc(&p, &tau);
        for (a, b) in p.values.iter().zip(&pp.values) {
            assert!((a - b).abs() < 1e-14);
        }
        // Projecting back onto h recovers the original values exactly.
        let back = project_pc(&p, &h);
        for (a, b) in back.values.iter().zip(&values) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn tv_seminorm_examples() {
        let g = uniform_grid(3).unwrap();
        let w = CellField::new(g.clone(), vec![0.0, 1.0, 0.0]).unwrap();
        assert!((tv_seminorm(&w) - 2.0).abs() < 1e-15);
        let c = CellField::constant(g, 4.2);
        assert_eq!(tv_seminorm(&c), 0.0);
        let g4 = uniform_grid(4).unwrap();
        let w = CellField::new(g4, vec![0.2, 0.9, 0.4, 0.4]).unwrap();
        assert!((tv_seminorm(&w) - 1.2).abs() < 1e-15);
    }

    #[test]
    fn triple_owner_map() {
        let triple = GridTriple::from_counts(32, 6, 3).unwrap();
        assert_eq!(triple.embedding_map, vec![0..2, 2..4, 4..6]);
        for i in 0..6 {
            assert_eq!(triple.owner_of(i), i / 2);
        }
        assert!(GridTriple::from_counts(32, 5, 3).is_err());
    }
}
