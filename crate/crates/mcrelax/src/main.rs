use clap::{Parser, Subcommand};
use mcrelax::balance::choose_grids;
use mcrelax::convex::DEFAULT_TOL;
use mcrelax::fem::solve_state_with;
use mcrelax::harness::{
    add_noise, init, noise_seed, run_fixed_grid_sweep, run_sweep, run_variant,
    synthesize_truth, truth_coefficient, ExperimentConfig, RunRecord,
};
use mcrelax::mesh::GridTriple;
use mcrelax::obbt::run_obbt;
use mcrelax::relax::{build_relaxation, BoundsProfile};
use std::path::PathBuf;
use std::process::ExitCode;

/// Dual bounds and reconstruction for 1D bilinear coefficient
/// identification: averaged McCormick relaxations, optimization-based
/// bound tightening, and a box-constrained local solver.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// TOML config file; missing keys fall back to the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the RNG seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the state equation for the exact coefficient (or a constant)
    /// and write the nodal solution as CSV.
    SolveState {
        /// Use a constant coefficient instead of the benchmark truth.
        #[arg(long)]
        w_const: Option<f64>,
    },
    /// Build and solve the convex relaxation under conservative bounds at
    /// one noise level.
    Relax {
        #[arg(long)]
        delta: f64,
    },
    /// Run bound tightening at one noise level and write the resulting
    /// per-cell bounds.
    Obbt {
        #[arg(long)]
        delta: f64,
    },
    /// Run a single reconstruction variant at one noise level.
    Reconstruct {
        #[arg(long)]
        delta: f64,
        /// Initialization strategy: O, P or N.
        #[arg(long)]
        init: String,
    },
    /// Run the full balanced sweep over all configured noise levels.
    Sweep,
    /// Re-run the sweep with grids frozen at a reference noise level.
    FixedSweep {
        /// Reference noise level; defaults to the config's delta_star.
        #[arg(long)]
        delta_star: Option<f64>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, String> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path).map_err(|e| e.to_string())?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn print_record(r: &RunRecord) {
    println!(
        "delta {:e} init {}: n_h {} n_tau {} eps_vs_zero {:.4e} eps_vs_mcc {} recon_err {:.4e} noise {:.4e}",
        r.delta,
        r.init,
        r.n_h,
        r.n_tau,
        r.eps_vs_zero,
        r.eps_vs_mcc
            .map(|v| format!("{v:.4e}"))
            .unwrap_or_else(|| "-".into()),
        r.recon_err,
        r.noise_measured
    );
    println!(
        "  runtimes [s]: obbt {} relax {} local {:.3e} total {:.3e}",
        r.obbt_s.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into()),
        r.relax_s.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into()),
        r.local_s,
        r.total_s
    );
}

fn run(cli: Cli) -> Result<(), String> {
    let cfg = load_config(&cli)?;
    let pd = cfg.problem_data();
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| e.to_string())?;
    match cli.cmd {
        Cmd::SolveState { w_const } => {
            let sim = mcrelax::mesh::uniform_grid(cfg.n_sim).map_err(|e| e.to_string())?;
            let coeff = match w_const {
                Some(c) => mcrelax::fem::ScalarFn::constant(c),
                None => truth_coefficient(),
            };
            let u = solve_state_with(&pd, &coeff, &sim).map_err(|e| e.to_string())?;
            let mut text = String::from("x,u\n");
            for (k, &x) in sim.breakpoints().iter().enumerate() {
                text.push_str(&format!("{x:.6e},{:.6e}\n", u.values()[k]));
            }
            let path = cfg.out_dir.join("state.csv");
            std::fs::write(&path, text).map_err(|e| e.to_string())?;
            println!("wrote {} ({} nodes)", path.display(), sim.n_nodes());
        }
        Cmd::Relax { delta } => {
            let grids = choose_grids(delta, cfg.s).map_err(|e| e.to_string())?;
            let (_, y) = synthesize_truth(&pd, cfg.n_sim).map_err(|e| e.to_string())?;
            let (yd, measured) = add_noise(&y, delta, cfg.noise_std_factor, noise_seed(cfg.seed, delta))
                .map_err(|e| e.to_string())?;
            let triple = GridTriple::from_counts(cfg.n_sim, grids.n_tau, grids.n_h)
                .map_err(|e| e.to_string())?;
            let profile = BoundsProfile::conservative(&triple, cfg.init_bound, pd.w_box);
            let model = build_relaxation(&pd, &triple, &profile, &yd).map_err(|e| e.to_string())?;
            let sol = model.solve(DEFAULT_TOL).map_err(|e| e.to_string())?;
            println!(
                "delta {delta:e}: n_h {} n_tau {} measured noise {measured:.4e}",
                grids.n_h, grids.n_tau
            );
            println!("relaxation bound m_mcc = {:.6e} (objective {:.6e})", sol.m_mcc, sol.objective);
            let mut text = String::from("tau_cell,owner_h_cell,w,z\n");
            for i in 0..grids.n_tau {
                let j = triple.owner_of(i);
                text.push_str(&format!("{i},{j},{:.6e},{:.6e}\n", sol.w.values[j], sol.z[i]));
            }
            let path = cfg.out_dir.join("relaxation.csv");
            std::fs::write(&path, text).map_err(|e| e.to_string())?;
            println!("wrote {}", path.display());
        }
        Cmd::Obbt { delta } => {
            let grids = choose_grids(delta, cfg.s).map_err(|e| e.to_string())?;
            let (_, y) = synthesize_truth(&pd, cfg.n_sim).map_err(|e| e.to_string())?;
            let (yd, _) = add_noise(&y, delta, cfg.noise_std_factor, noise_seed(cfg.seed, delta))
                .map_err(|e| e.to_string())?;
            let triple = GridTriple::from_counts(cfg.n_sim, grids.n_tau, grids.n_h)
                .map_err(|e| e.to_string())?;
            let profile = BoundsProfile::conservative(&triple, cfg.init_bound, pd.w_box);
            let model = build_relaxation(&pd, &triple, &profile, &yd).map_err(|e| e.to_string())?;
            let mut obbt_cfg = cfg.obbt.clone();
            obbt_cfg.initial_u_bound = cfg.init_bound;
            let (tight, report) = run_obbt(model, &obbt_cfg).map_err(|e| e.to_string())?;
            println!(
                "rounds {} lps {} wall {:.3e}s aborted {} volumes {:?}",
                report.rounds, report.lp_count, report.wall_time_s, report.aborted, report.bound_volumes
            );
            let p = tight.profile();
            let mut text = String::from("cell,u_lo,u_hi,z_lo,z_hi\n");
            for i in 0..grids.n_tau {
                text.push_str(&format!(
                    "{i},{:.6e},{:.6e},{:.6e},{:.6e}\n",
                    p.u_lo[i], p.u_hi[i], p.z_lo[i], p.z_hi[i]
                ));
            }
            let path = cfg.out_dir.join("bounds.csv");
            std::fs::write(&path, text).map_err(|e| e.to_string())?;
            println!("wrote {}", path.display());
        }
        Cmd::Reconstruct { delta, init: name } => {
            let strategy = init::lookup(&name)
                .ok_or_else(|| format!("unknown initialization '{name}' (expected O, P or N)"))?;
            let grids = choose_grids(delta, cfg.s).map_err(|e| e.to_string())?;
            let (truth, y) = synthesize_truth(&pd, cfg.n_sim).map_err(|e| e.to_string())?;
            let (yd, measured) = add_noise(&y, delta, cfg.noise_std_factor, noise_seed(cfg.seed, delta))
                .map_err(|e| e.to_string())?;
            let record = run_variant(&cfg, &pd, &truth, &grids, strategy, &yd, measured)
                .map_err(|e| e.to_string())?;
            print_record(&record);
            let mut text = String::from("x,w\n");
            for (j, &v) in record.w.values.iter().enumerate() {
                text.push_str(&format!("{:.6e},{:.6e}\n", record.w.grid.midpoint(j), v));
            }
            let path = cfg.out_dir.join(format!("recon_{}_{:e}.csv", record.init, delta));
            std::fs::write(&path, text).map_err(|e| e.to_string())?;
            println!("wrote {}", path.display());
        }
        Cmd::Sweep => {
            let outcome = run_sweep(&cfg).map_err(|e| e.to_string())?;
            for r in &outcome.records {
                print_record(r);
            }
            for f in &outcome.failures {
                eprintln!("FAILED delta {:e} init {}: {} ({})", f.delta, f.init, f.stage, f.message);
            }
            println!(
                "wrote grids.csv, results.csv, runtimes.csv, rate.csv and reconstruction profiles to {}",
                cfg.out_dir.display()
            );
        }
        Cmd::FixedSweep { delta_star } => {
            let ds = delta_star.unwrap_or(cfg.delta_star);
            let outcome = run_fixed_grid_sweep(&cfg, ds).map_err(|e| e.to_string())?;
            for r in &outcome.records {
                print_record(r);
            }
            for f in &outcome.failures {
                eprintln!("FAILED delta {:e} init {}: {} ({})", f.delta, f.init, f.stage, f.message);
            }
            println!(
                "wrote *_fixed.csv tables (grids frozen at delta_star = {ds:e}) to {}",
                cfg.out_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
