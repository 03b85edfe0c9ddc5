use mcrelax::balance::choose_grids;
use mcrelax::harness::{add_noise, init, noise_seed, run_variant, synthesize_truth, ExperimentConfig};

#[test]
#[ignore]
fn probe_pipeline() {
    let cfg = ExperimentConfig::default();
    let pd = cfg.problem_data();
    let (truth, y) = synthesize_truth(&pd, cfg.n_sim).unwrap();
    for &delta in &[1e-5f64] {
        let grids = choose_grids(delta, cfg.s).unwrap();
        let (yd, measured) = add_noise(&y, delta, cfg.noise_std_factor, noise_seed(cfg.seed, delta)).unwrap();
        for strat in init::registry() {
            let t = std::time::Instant::now();
            match run_variant(&cfg, &pd, &truth, &grids, *strat, &yd, measured) {
                Ok(r) => println!(
                    "delta {delta:.0e} init {} n_h {} eps0 {:.3e} epsm {:?} recon {:.3e} m_mcc {:?} obbt {:?} relax {:?} local {:.2} iters {} wall {:.2}s",
                    r.init, r.n_h, r.eps_vs_zero, r.eps_vs_mcc.map(|v| format!("{v:.3e}")), r.recon_err,
                    r.m_mcc.map(|v| format!("{v:.3e}")), r.obbt_s, r.relax_s, r.local_s, r.iterations,
                    t.elapsed().as_secs_f64()
                ),
                Err(e) => println!("delta {delta:.0e} init {} FAILED: {e}", strat.name()),
            }
        }
    }
}
