//! End-to-end experiment driver: synthesize truth and noisy data, run the
//! initialization variants across noise levels, and emit CSV tables.
//!
//! Output files (all RFC-4180, comma-separated, one header line):
//!
//! - `grids.csv`: `delta,h,n_h,tau,n_tau,noise_measured`
//! - `results.csv`: `delta,init,eps_vs_zero,eps_vs_mcc,recon_err,noise_measured`
//! - `runtimes.csv`: `delta,init,obbt_s,relax_s,local_s,total_s`
//! - `rate.csv`: `delta,err_O,err_P,err_N,reference`
//! - `recon_<init>_<delta>.csv`: two columns `x,w` (cell midpoints)
//!
//! The fixed-grid sweep writes the same schemas with a `_fixed` suffix.
//! A fixed (seed, config) pair reproduces the result tables byte for byte;
//! the runtime table naturally varies between runs.

pub mod init;

use crate::balance::{choose_grids, suboptimality, BalanceChoice, BalanceError};
use crate::fem::{misfit, solve_state_with, FemError, NodalField, ProblemData, ScalarFn};
use crate::localopt::{reconstruct, BoxQnConfig};
use crate::mesh::{CellField, GridTriple, MeshError};
use crate::obbt::ObbtConfig;
use crate::quad::GaussRule;
use init::{registry, InitStrategy, VariantContext};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

/// A pipeline stage failure, tagged with the stage name.
#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct StageError {
    pub stage: &'static str,
    pub message: String,
}

impl StageError {
    pub fn new(stage: &'static str, err: impl std::fmt::Display) -> Self {
        StageError {
            stage,
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Stage(#[from] StageError),
}

/// Experiment configuration; a TOML file with the same field names
/// overrides any subset of the defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_sim: usize,
    /// Noise levels, sorted descending.
    pub deltas: Vec<f64>,
    pub s: f64,
    pub noise_std_factor: f64,
    pub seed: u64,
    /// Magnitude of the conservative initial state bounds.
    pub init_bound: f64,
    /// Reference noise level freezing the grids in the fixed-grid sweep.
    pub delta_star: f64,
    pub out_dir: PathBuf,
    pub obbt: ObbtConfig,
    pub optimizer: BoxQnConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_sim: 1024,
            deltas: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
            s: 1.0,
            noise_std_factor: 1.1,
            seed: 42,
            init_bound: 1e3,
            delta_star: 1e-3,
            out_dir: PathBuf::from("out"),
            obbt: ObbtConfig::default(),
            optimizer: BoxQnConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_sim < 2 {
            return Err(HarnessError::Config("n_sim must be at least 2".into()));
        }
        if self.deltas.is_empty() {
            return Err(HarnessError::Config("empty noise-level list".into()));
        }
        for pair in self.deltas.windows(2) {
            if pair[1] >= pair[0] {
                return Err(HarnessError::Config(
                    "noise levels must be sorted strictly descending".into(),
                ));
            }
        }
        if self.deltas.iter().any(|d| *d <= 0.0 || *d > 1.0) {
            return Err(HarnessError::Config("noise levels must lie in (0, 1]".into()));
        }
        if !(self.s > 0.0 && self.s <= 1.0) {
            return Err(HarnessError::Config("s must lie in (0, 1]".into()));
        }
        if self.noise_std_factor <= 0.0 || self.init_bound <= 0.0 {
            return Err(HarnessError::Config(
                "noise_std_factor and init_bound must be positive".into(),
            ));
        }
        self.obbt.validate().map_err(HarnessError::Config)?;
        Ok(())
    }

    /// The benchmark problem data with this config's regularity exponent.
    pub fn problem_data(&self) -> ProblemData {
        let mut pd = ProblemData::benchmark();
        pd.s = self.s;
        pd
    }
}

/// The exact coefficient of the benchmark experiment: cos(2 pi x)^2.
pub fn truth_coefficient() -> ScalarFn {
    ScalarFn::new(|x| (2.0 * std::f64::consts::PI * x).cos().powi(2))
}

/// Exact state for the continuous truth coefficient on the simulation grid.
pub fn synthesize_truth(
    pd: &ProblemData,
    n_sim: usize,
) -> Result<(ScalarFn, NodalField), HarnessError> {
    let sim = crate::mesh::uniform_grid(n_sim)?;
    let truth = truth_coefficient();
    let y = solve_state_with(pd, &truth, &sim)?;
    Ok((truth, y))
}

/// Derive the per-noise-level generator seed from the base seed
/// (splitmix64-style finalizer over the base and the bits of delta).
pub fn noise_seed(base: u64, delta: f64) -> u64 {
    let mut z = base ^ delta.to_bits().wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Perturb the interior nodal values with independent centered Gaussian
/// draws of standard deviation `std_factor * delta` (ChaCha8 stream, fully
/// reproducible). Boundary nodes stay pinned. Returns the noisy field and
/// the measured distance ||y - ydelta||.
pub fn add_noise(
    y: &NodalField,
    delta: f64,
    std_factor: f64,
    seed: u64,
) -> Result<(NodalField, f64), HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std_factor * delta)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut noisy = y.clone();
    let n = noisy.values().len();
    for k in 1..n - 1 {
        noisy.values_mut()[k] += normal.sample(&mut rng);
    }
    let measured = misfit(y, &noisy)?;
    Ok((noisy, measured))
}

/// L2 distance between a continuous coefficient and a piecewise-constant
/// field, integrated cell by cell with a 16-point Gauss rule.
pub fn recon_error(truth: &ScalarFn, w: &CellField) -> f64 {
    recon_error_refined(truth, w, 1)
}

/// Same integral with each cell split into `refine` sub-intervals; used to
/// validate the quadrature of [`recon_error`].
pub fn recon_error_refined(truth: &ScalarFn, w: &CellField, refine: usize) -> f64 {
    let rule = GaussRule::new(16);
    let mut acc = 0.0;
    for (j, &val) in w.values.iter().enumerate() {
        let (a, b) = w.grid.cell(j);
        let dx = (b - a) / refine as f64;
        for r in 0..refine {
            let lo = a + r as f64 * dx;
            acc += rule.integrate(lo, lo + dx, |x| (truth.eval(x) - val).powi(2));
        }
    }
    acc.max(0.0).sqrt()
}

/// One row of the result tables.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub delta: f64,
    pub init: String,
    pub n_h: usize,
    pub n_tau: usize,
    pub noise_measured: f64,
    /// Suboptimality against the trivial lower bound zero, in squared
    /// objective units (1/2 * misfit^2).
    pub eps_vs_zero: f64,
    /// Suboptimality against the relaxation optimum (same units); absent
    /// when no relaxation was solved.
    pub eps_vs_mcc: Option<f64>,
    /// Relaxation bound in unsquared norm units.
    pub m_mcc: Option<f64>,
    pub recon_err: f64,
    pub obbt_s: Option<f64>,
    pub relax_s: Option<f64>,
    pub local_s: f64,
    pub total_s: f64,
    pub iterations: usize,
    /// Reconstruction profile for the two-column plot data.
    pub w: CellField,
}

/// A variant that failed, with the stage that failed.
#[derive(Debug, Clone)]
pub struct StageFailure {
    pub delta: f64,
    pub init: String,
    pub stage: &'static str,
    pub message: String,
}

/// Run one initialization variant for one noise level.
pub fn run_variant(
    cfg: &ExperimentConfig,
    pd: &ProblemData,
    truth: &ScalarFn,
    grids: &BalanceChoice,
    strategy: &dyn InitStrategy,
    ydelta: &NodalField,
    noise_measured: f64,
) -> Result<RunRecord, StageError> {
    let triple = GridTriple::from_counts(cfg.n_sim, grids.n_tau, grids.n_h)
        .map_err(|e| StageError::new("grid construction", e))?;
    let ctx = VariantContext {
        pd,
        triple: &triple,
        ydelta,
        init_bound: cfg.init_bound,
        obbt: &cfg.obbt,
    };
    let prepared = strategy.prepare(&ctx)?;
    let t_local = Instant::now();
    let rec = reconstruct(pd, &triple, ydelta, &prepared.w0, &cfg.optimizer)
        .map_err(|e| StageError::new("local solve", e))?;
    let local_s = t_local.elapsed().as_secs_f64();

    let eps_vs_zero = suboptimality(rec.objective, 0.0)
        .map_err(|e| StageError::new("suboptimality accounting", e))?;
    let eps_vs_mcc = prepared.relax_objective.map(|ro| rec.objective - ro);
    let total_s = local_s + prepared.obbt_s.unwrap_or(0.0) + prepared.relax_s.unwrap_or(0.0);
    Ok(RunRecord {
        delta: grids.delta,
        init: strategy.name().to_string(),
        n_h: grids.n_h,
        n_tau: grids.n_tau,
        noise_measured,
        eps_vs_zero,
        eps_vs_mcc,
        m_mcc: prepared.m_mcc,
        recon_err: recon_error(truth, &rec.w),
        obbt_s: prepared.obbt_s,
        relax_s: prepared.relax_s,
        local_s,
        total_s,
        iterations: rec.iterations,
        w: rec.w,
    })
}

/// Sweep outcome: per-(delta, init) records plus any recorded failures.
#[derive(Debug)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub failures: Vec<StageFailure>,
    pub grids: Vec<(BalanceChoice, f64)>,
}

fn sweep_core(
    cfg: &ExperimentConfig,
    grids_for: impl Fn(f64) -> Result<BalanceChoice, BalanceError>,
) -> Result<SweepOutcome, HarnessError> {
    cfg.validate()?;
    let pd = cfg.problem_data();
    let (truth, y_truth) = synthesize_truth(&pd, cfg.n_sim)?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut grid_rows = Vec::new();
    for &delta in &cfg.deltas {
        let mut grids = grids_for(delta)?;
        grids.delta = delta;
        let (ydelta, measured) = add_noise(
            &y_truth,
            delta,
            cfg.noise_std_factor,
            noise_seed(cfg.seed, delta),
        )?;
        grid_rows.push((grids.clone(), measured));
        for strategy in registry() {
            match run_variant(cfg, &pd, &truth, &grids, *strategy, &ydelta, measured) {
                Ok(rec) => records.push(rec),
                Err(err) => failures.push(StageFailure {
                    delta,
                    init: strategy.name().to_string(),
                    stage: err.stage,
                    message: err.message,
                }),
            }
        }
    }
    Ok(SweepOutcome {
        records,
        failures,
        grids: grid_rows,
    })
}

/// The balanced sweep: grids chosen per noise level, all variants, CSV
/// tables written into the output directory.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome, HarnessError> {
    let outcome = sweep_core(cfg, |delta| choose_grids(delta, cfg.s))?;
    write_outputs(cfg, &outcome, "")?;
    Ok(outcome)
}

/// The robustness sweep: grids frozen at `delta_star`, the same schemas
/// with a `_fixed` suffix.
pub fn run_fixed_grid_sweep(cfg: &ExperimentConfig, delta_star: f64) -> Result<SweepOutcome, HarnessError> {
    let frozen = choose_grids(delta_star, cfg.s)?;
    let outcome = sweep_core(cfg, |_| Ok(frozen.clone()))?;
    write_outputs(cfg, &outcome, "_fixed")?;
    Ok(outcome)
}

/// The reference decay rate delta^{1/(1+4s)}.
pub fn reference_rate(delta: f64, s: f64) -> f64 {
    delta.powf(1.0 / (1.0 + 4.0 * s))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6e}")).unwrap_or_default()
}

fn fmt_time(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3e}")).unwrap_or_default()
}

/// Write the CSV tables for a sweep outcome; `suffix` distinguishes the
/// fixed-grid variant.
pub fn write_outputs(
    cfg: &ExperimentConfig,
    outcome: &SweepOutcome,
    suffix: &str,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = |name: &str| cfg.out_dir.join(format!("{name}{suffix}.csv"));

    let mut grids = String::from("delta,h,n_h,tau,n_tau,noise_measured\n");
    for (g, measured) in &outcome.grids {
        writeln!(
            grids,
            "{:e},{:.6e},{},{:.6e},{},{:.6e}",
            g.delta, g.h, g.n_h, g.tau, g.n_tau, measured
        )
        .expect("string write");
    }
    std::fs::write(path("grids"), grids)?;

    let mut results = String::from("delta,init,eps_vs_zero,eps_vs_mcc,recon_err,noise_measured\n");
    for r in &outcome.records {
        writeln!(
            results,
            "{:e},{},{:.6e},{},{:.6e},{:.6e}",
            r.delta,
            r.init,
            r.eps_vs_zero,
            fmt_opt(r.eps_vs_mcc),
            r.recon_err,
            r.noise_measured
        )
        .expect("string write");
    }
    std::fs::write(path("results"), results)?;

    let mut runtimes = String::from("delta,init,obbt_s,relax_s,local_s,total_s\n");
    for r in &outcome.records {
        writeln!(
            runtimes,
            "{:e},{},{},{},{:.3e},{:.3e}",
            r.delta,
            r.init,
            fmt_time(r.obbt_s),
            fmt_time(r.relax_s),
            r.local_s,
            r.total_s
        )
        .expect("string write");
    }
    std::fs::write(path("runtimes"), runtimes)?;

    let mut rate = String::from("delta,err_O,err_P,err_N,reference\n");
    for (g, _) in &outcome.grids {
        let err_of = |tag: &str| {
            outcome
                .records
                .iter()
                .find(|r| r.delta == g.delta && r.init == tag)
                .map(|r| r.recon_err)
        };
        writeln!(
            rate,
            "{:e},{},{},{},{:.6e}",
            g.delta,
            fmt_opt(err_of("O")),
            fmt_opt(err_of("P")),
            fmt_opt(err_of("N")),
            reference_rate(g.delta, cfg.s)
        )
        .expect("string write");
    }
    std::fs::write(path("rate"), rate)?;

    for r in &outcome.records {
        let mut profile = String::from("x,w\n");
        for (j, &v) in r.w.values.iter().enumerate() {
            writeln!(profile, "{:.6e},{:.6e}", r.w.grid.midpoint(j), v).expect("string write");
        }
        let name = format!("recon_{}_{:e}{suffix}.csv", r.init, r.delta);
        std::fs::write(cfg.out_dir.join(name), profile)?;
    }
    Ok(())
}
