use mcrelax::balance::choose_grids;
use mcrelax::convex::DEFAULT_TOL;
use mcrelax::harness::{add_noise, noise_seed, recon_error, synthesize_truth, truth_coefficient, ExperimentConfig};
use mcrelax::localopt::{reconstruct, BoxQnConfig};
use mcrelax::mesh::GridTriple;
use mcrelax::obbt::{run_obbt, ObbtConfig};
use mcrelax::relax::{build_relaxation, BoundsProfile};

#[test]
#[ignore]
fn probe_centered_init() {
    let cfg = ExperimentConfig::default();
    let pd = cfg.problem_data();
    let truth = truth_coefficient();
    let (_, y) = synthesize_truth(&pd, cfg.n_sim).unwrap();
    let delta = 1e-4;
    let grids = choose_grids(delta, 1.0).unwrap();
    let (yd, _) = add_noise(&y, delta, 1.1, noise_seed(cfg.seed, delta)).unwrap();
    let triple = GridTriple::from_counts(cfg.n_sim, grids.n_tau, grids.n_h).unwrap();
    let profile = BoundsProfile::conservative(&triple, 1e3, (0.0, 1.0));

    for rounds in [0usize, 3, 6, 10, 20] {
        let model = build_relaxation(&pd, &triple, &profile, &yd).unwrap();
        let t0 = std::time::Instant::now();
        let model = if rounds == 0 {
            model
        } else {
            let oc = ObbtConfig { max_rounds: rounds, rel_improvement_tol: 1e-3, ..ObbtConfig::default() };
            run_obbt(model, &oc).unwrap().0
        };
        let obbt_t = t0.elapsed().as_secs_f64();
        let sol = model.solve(DEFAULT_TOL).unwrap();
        let init_err = recon_error(&truth, &sol.w);
        let rec = reconstruct(&pd, &triple, &yd, &sol.w, &BoxQnConfig::default()).unwrap();
        println!(
            "rounds {rounds:2}: obbt {obbt_t:6.1}s init_recon {init_err:.3e} final_recon {:.3e} status {:?} iters {}",
            recon_error(&truth, &rec.w), rec.status, rec.iterations
        );
    }
}
