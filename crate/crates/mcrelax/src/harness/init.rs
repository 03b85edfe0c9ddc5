//! Registry of reconstruction initialization strategies.
//!
//! Every strategy produces a starting coefficient for the local solver from
//! the same inputs; they are registered by name and selected at runtime
//! (CLI flag or sweep order). The three stock strategies mirror the
//! experiment variants: relaxation with bound tightening ("O"), relaxation
//! under the conservative bounds only ("P"), and a flat constant ("N").

use super::StageError;
use crate::convex::DEFAULT_TOL;
use crate::fem::{NodalField, ProblemData};
use crate::mesh::{CellField, GridTriple};
use crate::obbt::{run_obbt, ObbtConfig, ObbtReport};
use crate::relax::{build_relaxation, BoundsProfile, RelaxationModel};
use std::time::Instant;

/// Inputs shared by every strategy for one (delta, grids) instance.
pub struct VariantContext<'a> {
    pub pd: &'a ProblemData,
    pub triple: &'a GridTriple,
    pub ydelta: &'a NodalField,
    /// Magnitude of the conservative initial state bounds.
    pub init_bound: f64,
    pub obbt: &'a ObbtConfig,
}

impl VariantContext<'_> {
    fn conservative_model(&self) -> Result<RelaxationModel, StageError> {
        let profile = BoundsProfile::conservative(self.triple, self.init_bound, self.pd.w_box);
        build_relaxation(self.pd, self.triple, &profile, self.ydelta)
            .map_err(|e| StageError::new("relaxation build", e))
    }
}

/// What a strategy hands to the local solver, plus its bookkeeping.
pub struct Prepared {
    pub w0: CellField,
    /// Relaxation optimum in squared-objective units (1/2 * misfit^2),
    /// when a relaxation was solved.
    pub relax_objective: Option<f64>,
    /// The same bound in unsquared norm units.
    pub m_mcc: Option<f64>,
    pub obbt_report: Option<ObbtReport>,
    pub obbt_s: Option<f64>,
    pub relax_s: Option<f64>,
}

pub trait InitStrategy: Sync + Send {
    /// Registry key, also the tag written into result tables.
    fn name(&self) -> &'static str;
    fn describe(&self) -> &'static str;
    fn prepare(&self, ctx: &VariantContext) -> Result<Prepared, StageError>;
}

/// Relaxation solved after optimization-based bound tightening.
pub struct ObbtRelaxationInit;

impl InitStrategy for ObbtRelaxationInit {
    fn name(&self) -> &'static str {
        "O"
    }

    fn describe(&self) -> &'static str {
        "relaxation minimizer under tightened state bounds"
    }

    fn prepare(&self, ctx: &VariantContext) -> Result<Prepared, StageError> {
        let model = ctx.conservative_model()?;
        let t0 = Instant::now();
        let (model, report) =
            run_obbt(model, ctx.obbt).map_err(|e| StageError::new("bound tightening", e))?;
        let obbt_s = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let sol = model
            .solve(DEFAULT_TOL)
            .map_err(|e| StageError::new("relaxation solve", e))?;
        Ok(Prepared {
            w0: sol.w,
            relax_objective: Some(sol.objective),
            m_mcc: Some(sol.m_mcc),
            obbt_report: Some(report),
            obbt_s: Some(obbt_s),
            relax_s: Some(t1.elapsed().as_secs_f64()),
        })
    }
}

/// Relaxation solved under the conservative bounds, no tightening.
pub struct PlainRelaxationInit;

impl InitStrategy for PlainRelaxationInit {
    fn name(&self) -> &'static str {
        "P"
    }

    fn describe(&self) -> &'static str {
        "relaxation minimizer under conservative state bounds"
    }

    fn prepare(&self, ctx: &VariantContext) -> Result<Prepared, StageError> {
        let model = ctx.conservative_model()?;
        let t1 = Instant::now();
        let sol = model
            .solve(DEFAULT_TOL)
            .map_err(|e| StageError::new("relaxation solve", e))?;
        Ok(Prepared {
            w0: sol.w,
            relax_objective: Some(sol.objective),
            m_mcc: Some(sol.m_mcc),
            obbt_report: None,
            obbt_s: None,
            relax_s: Some(t1.elapsed().as_secs_f64()),
        })
    }
}

/// Flat start at the midpoint value 0.5.
pub struct ConstantInit;

impl InitStrategy for ConstantInit {
    fn name(&self) -> &'static str {
        "N"
    }

    fn describe(&self) -> &'static str {
        "constant coefficient 0.5"
    }

    fn prepare(&self, ctx: &VariantContext) -> Result<Prepared, StageError> {
        Ok(Prepared {
            w0: CellField::constant(ctx.triple.h.clone(), 0.5),
            relax_objective: None,
            m_mcc: None,
            obbt_report: None,
            obbt_s: None,
            relax_s: None,
        })
    }
}

static REGISTRY: [&dyn InitStrategy; 3] = [&ObbtRelaxationInit, &PlainRelaxationInit, &ConstantInit];

/// All registered strategies in sweep order.
pub fn registry() -> &'static [&'static dyn InitStrategy] {
    &REGISTRY
}

/// Look a strategy up by its registry key (case-insensitive).
pub fn lookup(name: &str) -> Option<&'static dyn InitStrategy> {
    REGISTRY
        .iter()
        .copied()
        .find(|s| s.name().eq_ignore_ascii_case(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_order_and_lookup() {
        let names: Vec<&str> = registry().iter().map(|s| s.name()).collect();
        assert_eq!(names, vec!["O", "P", "N"]);
        assert_eq!(lookup("o").unwrap().name(), "O");
        assert_eq!(lookup("N").unwrap().name(), "N");
        assert!(lookup("missing").is_none());
    }
}
