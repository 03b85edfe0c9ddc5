//! Optimization-based tightening of the per-cell state bounds.
//!
//! Each round solves, for every averaging cell, two LPs that minimize and
//! maximize the cell average of the state over the current relaxation
//! constraints (quadratic objective dropped). All 2 * N_tau LPs of a round
//! run against the round-entry model (Jacobi style) and may execute in
//! parallel; the profile update is the single synchronization point at the
//! round end. New bounds are intersected with the old ones, so bounds never
//! widen, and the product boxes are re-derived afterwards.

use crate::convex::{solve_lp, Status};
use crate::relax::{BoundsProfile, RelaxError, RelaxationModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObbtError {
    #[error(transparent)]
    Relax(#[from] RelaxError),
    #[error("bound-tightening LP for cell {cell} infeasible: profile inconsistent")]
    ProfileInconsistent { cell: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObbtConfig {
    pub max_rounds: usize,
    /// Stop when the largest relative bound shrinkage in a round falls
    /// below this.
    pub rel_improvement_tol: f64,
    /// Magnitude of the conservative initial state bounds.
    pub initial_u_bound: f64,
    pub lp_tol: f64,
}

impl Default for ObbtConfig {
    fn default() -> Self {
        ObbtConfig {
            max_rounds: 3,
            rel_improvement_tol: 1e-3,
            initial_u_bound: 1e3,
            lp_tol: 1e-8,
        }
    }
}

impl ObbtConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_rounds == 0 {
            return Err("max_rounds must be at least 1".into());
        }
        if self.rel_improvement_tol <= 0.0 || self.lp_tol <= 0.0 {
            return Err("tolerances must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ObbtReport {
    /// Completed rounds.
    pub rounds: usize,
    /// Bound volume after each completed round.
    pub bound_volumes: Vec<f64>,
    pub lp_count: usize,
    pub wall_time_s: f64,
    /// A round hit an infeasible LP and was discarded.
    pub aborted: bool,
    /// LPs that came back unbounded or capped; their incumbent bound was
    /// kept (sound, just not tightened).
    pub bounds_kept: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Min,
    Max,
}

#[derive(Debug, Clone, Copy)]
pub enum Tightened {
    Bound(f64),
    /// LP unbounded or capped; keep the incumbent.
    KeepIncumbent,
}

/// Solve min/max of the cell average of the state over the model's rows and
/// boxes. Returns the optimum; infeasibility signals an inconsistent bound
/// profile.
pub fn tighten_cell(
    model: &RelaxationModel,
    cell: usize,
    direction: Direction,
    lp_tol: f64,
) -> Result<Tightened, ObbtError> {
    let (a0, coeffs) = model.average_affine(cell);
    let mut lp = model.constraint_lp();
    lp.objective = match direction {
        Direction::Min => coeffs,
        Direction::Max => coeffs.iter().map(|c| -c).collect(),
    };
    let sol = solve_lp(&lp, lp_tol).map_err(RelaxError::from)?;
    match sol.status {
        Status::Optimal => Ok(Tightened::Bound(match direction {
            Direction::Min => a0 + sol.objective,
            Direction::Max => a0 - sol.objective,
        })),
        Status::Infeasible => Err(ObbtError::ProfileInconsistent { cell }),
        Status::Unbounded | Status::IterationLimit => Ok(Tightened::KeepIncumbent),
    }
}

/// One Jacobi round: both directions for every cell against the entry
/// model, new bounds intersected with the old, product boxes re-derived.
pub fn obbt_round(model: &RelaxationModel, lp_tol: f64) -> Result<(BoundsProfile, usize), ObbtError> {
    let n_tau = model.triple().n_tau();
    let jobs: Vec<(usize, Direction)> = (0..n_tau)
        .flat_map(|i| [(i, Direction::Min), (i, Direction::Max)])
        .collect();
    let results: Vec<Result<Tightened, ObbtError>> = jobs
        .par_iter()
        .map(|&(cell, dir)| tighten_cell(model, cell, dir, lp_tol))
        .collect();

    let mut profile = model.profile().clone();
    let mut kept = 0usize;
    for (job, res) in jobs.iter().zip(results) {
        let (cell, dir) = *job;
        match res? {
            Tightened::KeepIncumbent => kept += 1,
            Tightened::Bound(v) => match dir {
                Direction::Min => profile.u_lo[cell] = profile.u_lo[cell].max(v),
                Direction::Max => profile.u_hi[cell] = profile.u_hi[cell].min(v),
            },
        }
    }
    profile.derive_z_bounds(model.triple());
    Ok((profile, kept))
}

/// Iterate rounds until the improvement tolerance or the round cap; on an
/// inconsistent round the last consistent model is returned with the abort
/// noted in the report.
pub fn run_obbt(
    model: RelaxationModel,
    cfg: &ObbtConfig,
) -> Result<(RelaxationModel, ObbtReport), ObbtError> {
    cfg.validate().map_err(RelaxError::Dimension)?;
    let start = Instant::now();
    let mut report = ObbtReport::default();
    let mut model = model;
    for _ in 0..cfg.max_rounds {
        let old = model.profile().clone();
        let (new_profile, kept) = match obbt_round(&model, cfg.lp_tol) {
            Ok(pair) => pair,
            Err(ObbtError::ProfileInconsistent { .. }) => {
                report.aborted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        report.rounds += 1;
        report.lp_count += 2 * model.triple().n_tau();
        report.bounds_kept += kept;
        report.bound_volumes.push(new_profile.bound_volume());
        let mut improvement = 0.0f64;
        for i in 0..old.u_lo.len() {
            let old_w = old.u_hi[i] - old.u_lo[i];
            let new_w = new_profile.u_hi[i] - new_profile.u_lo[i];
            improvement = improvement.max((old_w - new_w) / old_w.max(1e-300));
        }
        model = model.with_profile(new_profile)?;
        if improvement < cfg.rel_improvement_tol {
            break;
        }
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::DEFAULT_TOL;
    use crate::fem::{solve_state, NodalField, ProblemData, ScalarFn};
    use crate::mesh::{CellField, GridTriple};
    use crate::relax::{build_relaxation, lifted_point, BoundsProfile};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pd_simple() -> ProblemData {
        ProblemData {
            f0: ScalarFn::constant(1.0),
            f1: ScalarFn::constant(1.0),
            w_box: (0.0, 1.0),
            s: 1.0,
        }
    }

    fn toy_model() -> (ProblemData, GridTriple, NodalField) {
        let pd = pd_simple();
        let triple = GridTriple::from_counts(4, 1, 1).unwrap();
        let y = NodalField::zeros(triple.sim.clone());
        (pd, triple, y)
    }

    #[test]
    fn point_boxes_pin_the_average() {
        let (pd, triple, y) = toy_model();
        let w_val = 0.4;
        let w = CellField::constant(triple.h.clone(), w_val);
        let (u, _) = lifted_point(&pd, &triple, &w).unwrap();
        let avg = crate::fem::tau_averages(&triple, &u)[0];
        let profile = BoundsProfile {
            u_lo: vec![avg],
            u_hi: vec![avg],
            w_lo: vec![w_val],
            w_hi: vec![w_val],
            z_lo: vec![avg * w_val],
            z_hi: vec![avg * w_val],
        };
        let model = build_relaxation(&pd, &triple, &profile, &y).unwrap();
        for dir in [Direction::Min, Direction::Max] {
            match tighten_cell(&model, 0, dir, DEFAULT_TOL).unwrap() {
                Tightened::Bound(b) => assert!(
                    (b - avg).abs() < 1e-8,
                    "{dir:?} bound {b} vs pinned average {avg}"
                ),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn toy_bounds_enclose_brute_force_state_range() {
        let (pd, triple, y) = toy_model();
        let profile = BoundsProfile::conservative(&triple, 1e3, (0.0, 1.0));
        let model = build_relaxation(&pd, &triple, &profile, &y).unwrap();
        let lo = match tighten_cell(&model, 0, Direction::Min, DEFAULT_TOL).unwrap() {
            Tightened::Bound(b) => b,
            _ => panic!("bounded box, LP must be bounded"),
        };
        let hi = match tighten_cell(&model, 0, Direction::Max, DEFAULT_TOL).unwrap() {
            Tightened::Bound(b) => b,
            _ => panic!("bounded box, LP must be bounded"),
        };
        // Brute force over coefficient samples, plain (non-averaged) solve.
        let mut oracle_lo = f64::INFINITY;
        let mut oracle_hi = f64::NEG_INFINITY;
        for k in 0..=1000 {
            let w = CellField::constant(triple.h.clone(), k as f64 / 1000.0);
            let u = solve_state(&pd, &w, &triple.sim).unwrap();
            let avg = crate::fem::tau_averages(&triple, &u)[0];
            oracle_lo = oracle_lo.min(avg);
            oracle_hi = oracle_hi.max(avg);
        }
        assert!(lo <= oracle_lo + 1e-9, "LP min {lo} vs oracle min {oracle_lo}");
        assert!(hi >= oracle_hi - 1e-9, "LP max {hi} vs oracle max {oracle_hi}");
    }

    #[test]
    fn widening_z_boxes_never_tightens() {
        let (pd, triple, y) = toy_model();
        let base = BoundsProfile::conservative(&triple, 50.0, (0.0, 1.0));
        let mut wide = base.clone();
        wide.z_lo[0] -= 100.0;
        wide.z_hi[0] += 100.0;
        let m_base = build_relaxation(&pd, &triple, &base, &y).unwrap();
        let m_wide = build_relaxation(&pd, &triple, &wide, &y).unwrap();
        for dir in [Direction::Min, Direction::Max] {
            let b = match tighten_cell(&m_base, 0, dir, DEFAULT_TOL).unwrap() {
                Tightened::Bound(b) => b,
                _ => panic!(),
            };
            let w = match tighten_cell(&m_wide, 0, dir, DEFAULT_TOL).unwrap() {
                Tightened::Bound(b) => b,
                _ => panic!(),
            };
            match dir {
                Direction::Min => assert!(w <= b + 1e-9, "min: wide {w} vs base {b}"),
                Direction::Max => assert!(w >= b - 1e-9, "max: wide {w} vs base {b}"),
            }
        }
    }

    fn medium_setup() -> (ProblemData, GridTriple, NodalField) {
        let pd = pd_simple();
        let triple = GridTriple::from_counts(64, 8, 4).unwrap();
        let w_true = CellField::new(triple.h.clone(), vec![0.9, 0.2, 0.6, 0.4]).unwrap();
        let y = solve_state(&pd, &w_true, &triple.sim).unwrap();
        (pd, triple, y)
    }

    #[test]
    fn one_round_shrinks_conservative_bounds() {
        let (pd, triple, y) = medium_setup();
        let profile = BoundsProfile::conservative(&triple, 1e3, (0.0, 1.0));
        let model = build_relaxation(&pd, &triple, &profile, &y).unwrap();
        let (new_profile, _) = obbt_round(&model, DEFAULT_TOL).unwrap();
        for i in 0..triple.n_tau() {
            assert!(new_profile.u_lo[i] > -1e3);
            assert!(new_profile.u_hi[i] < 1e3);
        }
        // The relaxation minimizer's averages stay inside the new bounds.
        let tightened = model.with_profile(new_profile.clone()).unwrap();
        let sol = tightened.solve(DEFAULT_TOL).unwrap();
        let avgs = crate::fem::tau_averages(&triple, &sol.u);
        for i in 0..triple.n_tau() {
            assert!(avgs[i] >= new_profile.u_lo[i] - 1e-7);
            assert!(avgs[i] <= new_profile.u_hi[i] + 1e-7);
        }
    }

    #[test]
    fn lifted_points_survive_rounds() {
        let (pd, triple, y) = medium_setup();
        let profile = BoundsProfile::conservative(&triple, 1e3, (0.0, 1.0));
        let model = build_relaxation(&pd, &triple, &profile, &y).unwrap();
        let cfg = ObbtConfig {
            max_rounds: 3,
            ..ObbtConfig::default()
        };
        let (tightened, report) = run_obbt(model, &cfg).unwrap();
        assert!(!report.aborted);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..8 {
            let w = CellField::new(
                triple.h.clone(),
                (0..triple.n_h()).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap();
            let (u, z) = lifted_point(&pd, &triple, &w).unwrap();
            let res = tightened.mcc_residual(&u, &w, &z);
            assert!(
                res.max_violation <= 1e-7,
                "lifted point cut by tightening: {} at {}",
                res.max_violation,
                res.location
            );
        }
    }

    #[test]
    fn report_counts_and_monotone_volume() {
        let (pd, triple, y) = medium_setup();
        let profile = BoundsProfile::conservative(&triple, 1e3, (0.0, 1.0));
        let model = build_relaxation(&pd, &triple, &profile, &y).unwrap();
        let cfg = ObbtConfig {
            max_rounds: 1,
            ..ObbtConfig::default()
        };
        let (_, report) = run_obbt(model, &cfg).unwrap();
        assert_eq!(report.rounds, 1);
        assert_eq!(report.lp_count, 2 * triple.n_tau());

        let model = build_relaxation(&pd, &triple, &profile, &y).unwrap();
        let cfg = ObbtConfig {
            max_rounds: 4,
            rel_improvement_tol: 1e-12,
            ..ObbtConfig::default()
        };
        let (tightened, report) = run_obbt(model, &cfg).unwrap();
        assert_eq!(report.lp_count, 2 * triple.n_tau() * report.rounds);
        for pair in report.bound_volumes.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "volume grew: {pair:?}");
        }
        // Per-cell monotonicity against the start.
        let p = tightened.profile();
        for i in 0..triple.n_tau() {
            assert!(p.u_lo[i] >= -1e3 && p.u_hi[i] <= 1e3);
            assert!(p.u_lo[i] <= p.u_hi[i]);
        }
    }

    #[test]
    fn tightening_never_lowers_the_relaxation_optimum() {
        let (pd, triple, y) = medium_setup();
        let profile = BoundsProfile::conservative(&triple, 1e3, (0.0, 1.0));
        let model = build_relaxation(&pd, &triple, &profile, &y).unwrap();
        let before = model.solve(DEFAULT_TOL).unwrap().m_mcc;
        let (tightened, _) = run_obbt(model, &ObbtConfig::default()).unwrap();
        let after = tightened.solve(DEFAULT_TOL).unwrap().m_mcc;
        assert!(after >= before - 1e-9, "m_mcc fell from {before} to {after}");
    }

    #[test]
    fn zero_rounds_rejected() {
        let cfg = ObbtConfig {
            max_rounds: 0,
            ..ObbtConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
